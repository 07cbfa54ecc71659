"""Completion gateway over OpenAI-compatible endpoints and simulated responders.

Mocks are deterministic: every random choice is a hash of
``(seed, trial_id, purpose)``, so concurrency and scheduling never change
what a mock answers.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Mapping

import httpx

from .errors import BackendHTTPError, CollectionError, ConfigError
from .rng import hash_uniform
from .schema import BLANK, Gender, gender_of

log = logging.getLogger(__name__)

SYSTEM_PROMPT = (
    "Below you will find a passage in *bold* which contains precisely one instance of the term BLANK. "
    "Your task is to replace BLANK with one of the options provided. The task is designed to be "
    "unambiguous, so please provide only one token for the blank and do not reorder the data. "
    "Do not repeat the sentence."
)
USER_TEMPLATE = (
    "Given this passage:  *{passage}* Replace BLANK with one of the options: [{first}, {second}]. "
    "Respond only in the following format {{'BLANK': '<text>'}}"
)
ASSISTANT_PREFIX = "{'BLANK':'"

DIALECTS = ("default", "no_assistant")
RETRYABLE_STATUS = {408, 409, 425, 429}


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.5
    max_new_tokens: int = 6
    top_k: int = 40
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("must be >= 0", "params.temperature")
        if self.max_new_tokens < 1:
            raise ConfigError("must be >= 1", "params.max_new_tokens")
        if self.top_k < 1:
            raise ConfigError("must be >= 1", "params.top_k")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    base_backoff: float = 0.5

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ConfigError("must be >= 1", "retry.max_attempts")
        if self.base_backoff < 0:
            raise ConfigError("must be >= 0", "retry.base_backoff")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    params: GenerationParams = GenerationParams()
    # trial context; mocks read it, the HTTP path never sends it
    meta: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def payload_messages(self) -> list[dict[str, str]]:
        return [{"role": role, "content": text} for role, text in self.messages]


def build_prompt(passage: str, options: tuple[str, str], dialect: str = "default",
                 params: GenerationParams | None = None, meta: Mapping[str, Any] | None = None) -> ChatRequest:
    """Forced-choice chat request for one passage and an ordered option pair."""
    if passage.count(BLANK) != 1:
        raise ValueError(f"passage must contain exactly one {BLANK}: {passage!r}")
    if dialect not in DIALECTS:
        raise ConfigError(f"unknown dialect {dialect!r}", "backend.dialect")
    messages = [
        ("system", SYSTEM_PROMPT),
        ("user", USER_TEMPLATE.format(passage=passage, first=options[0], second=options[1])),
    ]
    if dialect == "default":
        messages.append(("assistant", ASSISTANT_PREFIX))
    return ChatRequest(tuple(messages), params or GenerationParams(), dict(meta or {}))


# ---------------------------------------------------------------------------
# simulated responders

def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def _check_prob(value: Any, name: str) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected a probability, got {value!r}", name) from None
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{value} not in [0, 1]", name)
    return value


def normalize_noun(noun: str) -> str:
    return " ".join(noun.lower().replace("-", " ").replace("_", " ").split())


def _uniform_choice(options, u: float) -> str:
    return options[min(int(u * len(options)), len(options) - 1)]


class Strategy:
    """Answers one trial given its metadata and a uniform draw ``u``."""

    def p_feminine(self, meta: Mapping[str, Any]) -> float:
        return 0.5

    def choose(self, meta: Mapping[str, Any], u: float) -> str:
        options = list(meta["options"])
        if meta.get("task") == "metaprompt":
            return self.metaprompt(meta, u)
        fem, masc = _gendered(options)
        return fem if u < self.p_feminine(meta) else masc

    def metaprompt(self, meta: Mapping[str, Any], u: float) -> str:
        return _uniform_choice(list(meta["options"]), u)


def _gendered(options) -> tuple[str, str]:
    a, b = options
    return (a, b) if gender_of(a) is Gender.FEMININE and a != b else (b, a)


class PrimeRepeater(Strategy):
    def __init__(self, repeat_prob: float, base: float = 0.5):
        self.repeat_prob = _check_prob(repeat_prob, "strategy.repeat_prob")
        self.base = _check_prob(base, "strategy.base")

    def p_feminine(self, meta):
        prime = meta.get("prime_gender")
        if prime is None:
            return self.base
        return self.repeat_prob if prime == Gender.FEMININE.value else 1.0 - self.repeat_prob

    def metaprompt(self, meta, u):
        prime = meta.get("prime_gender")
        if meta.get("question_kind") == "gender_tracking" and prime is not None:
            same = "female" if prime == Gender.FEMININE.value else "male"
            other = "male" if same == "female" else "female"
            return same if u < self.repeat_prob else other
        return super().metaprompt(meta, u)


class StereotypeFollower(Strategy):
    def __init__(self, norms: Mapping[str, float], slope: float):
        self.norms = {normalize_noun(k): float(v) for k, v in norms.items()}
        for k, v in self.norms.items():
            _check_prob(v, f"strategy.norms[{k}]")
        self.slope = float(slope)

    def p_feminine(self, meta):
        rating = self.norms.get(normalize_noun(meta.get("target_noun", "")))
        if rating is None:
            return 0.5
        return _clamp01(0.5 + self.slope * (rating - 0.5))


class OrderPicker(Strategy):
    def __init__(self, first_option_prob: float):
        self.first_option_prob = _check_prob(first_option_prob, "strategy.first_option_prob")

    def choose(self, meta, u):
        if meta.get("task") == "metaprompt":
            return self.metaprompt(meta, u)
        first, second = meta["options"]
        return first if u < self.first_option_prob else second


class FixedTable(Strategy):
    """Per-cell P(feminine); the most specific matching entry wins."""

    def __init__(self, entries: list[Mapping[str, Any]] | None = None, default: float = 0.5):
        self.default = _check_prob(default, "strategy.default")
        self.table: dict[tuple[str | None, str | None, str | None], float] = {}
        for i, e in enumerate(entries or []):
            key = (e.get("template_id"), e.get("setting"), e.get("order"))
            self.table[key] = _check_prob(e.get("p_feminine"), f"strategy.entries[{i}].p_feminine")

    def p_feminine(self, meta):
        t, s, o = meta.get("template_id"), meta.get("setting"), meta.get("order")
        for key in ((t, s, o), (t, s, None), (t, None, o), (t, None, None),
                    (None, s, o), (None, s, None), (None, None, o)):
            if key in self.table:
                return self.table[key]
        return self.default


class Oracle(Strategy):
    """Answers comprehension questions correctly; pronoun choice is a coin flip."""

    def metaprompt(self, meta, u):
        return meta["correct"]


class Composite(Strategy):
    def __init__(self, by_setting: Mapping[str, Strategy], default: Strategy):
        self.by_setting = dict(by_setting)
        self.default = default

    def _pick(self, meta) -> Strategy:
        return self.by_setting.get(meta.get("setting"), self.default)

    def choose(self, meta, u):
        return self._pick(meta).choose(meta, u)


def make_strategy(spec: Mapping[str, Any]) -> Strategy:
    """Build a strategy from its config mapping (``{"name": ..., **params}``)."""
    if not isinstance(spec, Mapping) or "name" not in spec:
        raise ConfigError("strategy spec needs a 'name'", "backend.strategy")
    name = spec["name"]
    try:
        if name == "prime_repeater":
            return PrimeRepeater(spec["repeat_prob"], spec.get("base", 0.5))
        if name == "stereotype_follower":
            norms = spec["norms_table"]
            if isinstance(norms, str):
                from .stats import load_norms

                norms = load_norms(norms).ratings
            return StereotypeFollower(norms, spec.get("slope", 1.0))
        if name == "order_picker":
            return OrderPicker(spec["first_option_prob"])
        if name == "fixed_table":
            return FixedTable(spec.get("entries"), spec.get("default", 0.5))
        if name == "uniform":
            return Strategy()
        if name == "oracle":
            return Oracle()
        if name == "composite":
            return Composite({k: make_strategy(v) for k, v in spec.get("by_setting", {}).items()},
                             make_strategy(spec.get("default", {"name": "uniform"})))
    except KeyError as exc:
        raise ConfigError(f"missing parameter {exc.args[0]!r} for strategy {name!r}", "backend.strategy") from None
    raise ConfigError(f"unknown strategy {name!r}", "backend.strategy")


MALFORMED_RESPONSES = ("{'ANSWER': 'she'}", "she or he", "", "{'BLANK': 'they'}")


def injected_malformation(seed: int, trial_id: str, rate: float) -> bool:
    """Whether a mock with ``malformed_rate=rate`` corrupts this trial."""
    return rate > 0 and hash_uniform(seed, trial_id, "malformed") < rate


# ---------------------------------------------------------------------------
# configuration and gateway

BACKEND_KINDS = ("http_chat", "mock_scripted", "mock_strategy")


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock_strategy"
    endpoint: str | None = None
    model_name: str = "mock"
    credentials: str | None = "OPENAI_API_KEY"  # environment variable holding the bearer token
    max_in_flight: int = 1
    retry: RetryPolicy = RetryPolicy()
    params: GenerationParams = GenerationParams()
    strategy: Mapping[str, Any] | None = None
    responses: tuple[str, ...] = ()
    dialect: str = "default"
    seed: int = 0
    malformed_rate: float = 0.0
    fail_rate: float = 0.0
    timeout: float = 30.0
    extra_body: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}, expected one of {BACKEND_KINDS}", "backend.kind")
        if self.max_in_flight < 1:
            raise ConfigError("must be >= 1", "backend.max_in_flight")
        if self.dialect not in DIALECTS:
            raise ConfigError(f"unknown dialect {self.dialect!r}", "backend.dialect")
        _check_prob(self.malformed_rate, "backend.malformed_rate")
        _check_prob(self.fail_rate, "backend.fail_rate")
        if self.kind == "http_chat" and not self.endpoint:
            raise ConfigError("required for http_chat", "backend.endpoint")
        if self.kind == "mock_strategy":
            make_strategy(self.strategy or {"name": "uniform"})

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BackendConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "backend")
        if "retry" in data:
            data["retry"] = RetryPolicy(**data["retry"])
        if "params" in data:
            data["params"] = GenerationParams(**data["params"])
        if "responses" in data:
            data["responses"] = tuple(data["responses"])
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["responses"] = list(self.responses)
        out["strategy"] = dict(self.strategy) if self.strategy else None
        out["extra_body"] = dict(self.extra_body)
        return out

    @property
    def fingerprint(self) -> str:
        where = self.endpoint or "local"
        return f"{self.kind}:{self.model_name}@{where}"


class Gateway:
    """Thread-safe completion client; owns throttling and retries.

    At most ``config.max_in_flight`` requests are outstanding at once,
    however many threads call :meth:`complete`.
    """

    def __init__(self, config: BackendConfig, responder: Callable[[ChatRequest], str] | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._slots = threading.Condition()
        self._in_flight = 0
        self.max_observed_in_flight = 0
        self.calls = 0
        self._sleep = sleep
        self._responder = responder
        self._strategy = make_strategy(config.strategy or {"name": "uniform"}) if config.kind == "mock_strategy" else None
        self._client: httpx.Client | None = None
        if config.kind == "http_chat":
            headers = {"Content-Type": "application/json"}
            token = os.environ.get(config.credentials) if config.credentials else None
            if token:
                headers["Authorization"] = f"Bearer {token}"
            self._client = httpx.Client(timeout=config.timeout, headers=headers,
                                        limits=httpx.Limits(max_connections=config.max_in_flight))

    def close(self) -> None:
        if self._client is not None:
            self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def complete(self, request: ChatRequest) -> str:
        limit = self.config.max_in_flight
        with self._slots:
            while self._in_flight >= limit:
                self._slots.wait()
            self._in_flight += 1
            self.calls += 1
            if self._in_flight > self.max_observed_in_flight:
                self.max_observed_in_flight = self._in_flight
        try:
            return self._with_retries(request)
        finally:
            with self._slots:
                self._in_flight -= 1
                self._slots.notify()

    def _with_retries(self, request: ChatRequest) -> str:
        policy = self.config.retry
        trial_id = request.meta.get("trial_id", "")
        last: Exception | None = None
        for attempt in range(1, policy.max_attempts + 1):
            try:
                return self._once(request, attempt)
            except BackendHTTPError as exc:
                if exc.status not in RETRYABLE_STATUS and exc.status < 500:
                    exc.attempts = attempt
                    raise
                last = exc
            except (httpx.TransportError, _TransientMockError) as exc:
                last = exc
            if attempt < policy.max_attempts and policy.base_backoff > 0:
                jitter = hash_uniform("jitter", trial_id, attempt)
                self._sleep(policy.base_backoff * 2 ** (attempt - 1) * (1.0 + jitter))
        log.warning("giving up on %s after %d attempts: %s", trial_id or "request", policy.max_attempts, last)
        if isinstance(last, BackendHTTPError):
            last.attempts = policy.max_attempts
            raise last
        raise CollectionError(f"transport failure: {last}", policy.max_attempts)

    def _once(self, request: ChatRequest, attempt: int) -> str:
        cfg = self.config
        if cfg.kind == "http_chat":
            return self._http(request)
        trial_id = request.meta.get("trial_id", "")
        if cfg.fail_rate > 0 and hash_uniform(cfg.seed, trial_id, "fail", attempt) < cfg.fail_rate:
            raise _TransientMockError(f"injected failure for {trial_id}")
        if injected_malformation(cfg.seed, trial_id, cfg.malformed_rate):
            pick = hash_uniform(cfg.seed, trial_id, "malformed_kind")
            return _uniform_choice(MALFORMED_RESPONSES, pick)
        if self._responder is not None:
            return self._responder(request)
        if cfg.kind == "mock_scripted":
            if not cfg.responses:
                raise ConfigError("mock_scripted needs responses or a responder", "backend.responses")
            return _uniform_choice(cfg.responses, hash_uniform(cfg.seed, trial_id, "script"))
        meta = request.meta
        if "options" not in meta:
            raise ConfigError("mock_strategy requests need trial metadata with options", "backend.strategy")
        choice = self._strategy.choose(meta, hash_uniform(cfg.seed, trial_id, "draw"))
        if meta.get("task") == "metaprompt":
            return choice
        return f"{{'BLANK': '{choice}'}}"

    def _http(self, request: ChatRequest) -> str:
        cfg = self.config
        url = cfg.endpoint.rstrip("/")
        if not url.endswith("/chat/completions"):
            url += "/chat/completions"
        payload = {
            "model": cfg.model_name,
            "messages": request.payload_messages(),
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_new_tokens,
            "top_k": request.params.top_k,
            **cfg.extra_body,
        }
        response = self._client.post(url, json=payload)
        if response.status_code >= 400:
            raise BackendHTTPError(response.status_code, response.text)
        try:
            return response.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendHTTPError(response.status_code, f"unexpected body: {response.text}") from exc


class _TransientMockError(Exception):
    pass


_GATEWAYS: dict[int, Gateway] = {}
_GATEWAYS_LOCK = threading.Lock()


def complete(request: ChatRequest, config: BackendConfig) -> str:
    """Complete one request with a process-wide gateway for ``config``."""
    with _GATEWAYS_LOCK:
        gw = _GATEWAYS.get(id(config))
        if gw is None or gw.config is not config:
            gw = _GATEWAYS[id(config)] = Gateway(config)
    return gw.complete(request)

