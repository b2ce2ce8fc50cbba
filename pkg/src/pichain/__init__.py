"""pichain: a self-contained permissioned location ledger.

One miner seals a hash-linked chain of device registrations and GPS
location reports; a gateway node feeds it parsed location texts; the
parent console holds the only read and registration rights.
"""

from .chain import (
    Block,
    BlockHeader,
    Chain,
    ChainError,
    ChainLoadError,
    Transaction,
    TxKind,
    VerifyReport,
    append_block,
    hash_header,
    load_chain,
    make_genesis,
    new_chain,
    persist_chain,
    verify_chain,
)
from .policy import (
    Decision,
    DenyReason,
    GeoFence,
    Notification,
    PolicyConfig,
    PolicyState,
    Role,
    check_home_arrival,
    check_location_submission,
    check_read_request,
    check_registration_request,
    check_removal_request,
    haversine_m,
    query_locations,
)
from .registry import DeviceRecord, DeviceStatus
from .sms import (
    BadDate,
    FieldOutOfRange,
    GrammarMismatch,
    LocationReport,
    RawSms,
    SmsError,
    parse_sms,
    serialize_report,
)
from .wire import NodeIdentity

__version__ = "0.1.0"
