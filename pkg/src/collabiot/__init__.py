"""Auto-configuration of transient IoT devices: policies, capability tokens, proxies."""

from .engine import (
    AccessGrant,
    ChangeResult,
    Conflict,
    ConflictError,
    DeviceRecord,
    Mutation,
    PolicyEngine,
    PolicyStore,
    UnknownDevice,
    apply_change,
    detect_conflicts,
    match_groups,
    resolve_access,
)
from .model import (
    AccessPolicy,
    AttributeConstraint,
    CapabilityEntry,
    GroupSpec,
    Limit,
    PolicyDocument,
    PolicySyntaxError,
    SchemaError,
    parse_policy_document,
    serialize_policy_document,
)
from .tokens import TokenClaims, TokenService, sign_token, verify

__version__ = "0.1.0"
