"""User-space NAT dataplane with mask-partitioned hash rule lookup."""

from .config import format_rules, parse_rules, parse_rules_text
from .conntrack import ConnEntry, LocalConnTable, Mailbox
from .engine import Counters, Engine, EngineConfig, RunReport, run_engine
from .lockfree import ConcurrentSubtableSet
from .packet import (FiveTuple, HeaderView, ParseError, build_packet,
                     full_checksum, incremental_checksum, parse_packet,
                     rewrite_tuple)
from .pool import PoolExhausted, PoolState
from .rss import RssConfig, core_for_tuple, toeplitz_hash
from .rules import (ANY, DNAT, SNAT, WILDCARD, NatRule, SubtableSet,
                    TargetPool, bucket_hash, linear_lookup, mask_ip, qns_lookup)
from .traffic import FlowSpec, gen_flows, pcap_read, pcap_write

__version__ = "0.1.0"
