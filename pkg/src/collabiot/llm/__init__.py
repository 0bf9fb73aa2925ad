from .backends import BackendError, EchoBackend, EndpointConfig, HttpChatBackend, LlmBackend, ScriptedBackend
from .pipeline import (
    ACCEPTED,
    BACKEND_ERROR,
    REJECTED,
    CriticResult,
    GenerationRequest,
    PipelineOutcome,
    TranscriptEntry,
    UnparseableVerdict,
    critic_check,
    generate,
    parse_verdict,
)
from .render import render_policy_text
