"""Flat ``key = value`` run configuration and the ablation variant table."""

import dataclasses
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

VARIANTS = (
    "full",
    "no_itm_loss",
    "no_irtm_loss",
    "no_cla_loss",
    "no_entities",
    "no_ocr",
    "no_itm_match",
    "no_region_match",
    "no_filter_module",
)
TOGGLES = VARIANTS[1:]


@dataclass
class RunConfig:
    # training
    learning_rate: float = 1e-3
    dropout: float = 0.1
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    lambda_c: float = 0.5
    stage: int = 1
    grad_clip: float = 5.0
    eval_every: int = 1
    eval_beam: int = 10
    # model
    d1: int = 300
    d_emb: int = 200
    d2: int = 128
    n_heads: int = 4
    d_ffn_region: int = 64
    top_k: int = 5
    max_input_len: int = 200
    max_decode_len: int = 6
    vocab_size: int = 45000
    # data paths (relative paths resolve against the output directory)
    train_path: str = "train.jsonl"
    valid_path: str = "valid.jsonl"
    test_path: str = "test.jsonl"
    matching_path: str = "matching.jsonl"
    checkpoint: str = ""
    predictions_path: str = "predictions.jsonl"
    # synthetic corpus
    n_samples: int = 512
    synth_vocab_size: int = 200
    n_topics: int = 4
    noise_region_fraction: float = 0.0
    avg_keyphrases: float = 1.33
    p_present: float = 0.63
    # prediction / ablation
    beam: int = 10
    seeds: list = field(default_factory=lambda: [0])
    variants: list = field(default_factory=lambda: list(VARIANTS))
    # ablation toggles
    no_itm_loss: bool = False
    no_irtm_loss: bool = False
    no_cla_loss: bool = False
    no_entities: bool = False
    no_ocr: bool = False
    no_itm_match: bool = False
    no_region_match: bool = False
    no_filter_module: bool = False

    def validate(self):
        for name in ("d1", "d_emb", "d2", "n_heads", "d_ffn_region", "vocab_size", "beam", "n_samples",
                     "synth_vocab_size", "n_topics", "top_k", "max_input_len", "max_decode_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d1 % self.n_heads:
            raise ConfigError(f"d1={self.d1} must be divisible by n_heads={self.n_heads}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; expected one of {', '.join(VARIANTS)}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        self.train_config()
        self.model_config()
        return self

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_variant(self, name):
        """Copy with every toggle cleared except the one named (``full`` clears all)."""
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}")
        flags = {t: t == name for t in TOGGLES}
        return dataclasses.replace(self, **flags)

    def model_config(self, precision=64):
        smooth = not self.no_itm_match
        mode = "full"
        if self.no_region_match:
            mode = "coarse"
        if self.no_filter_module:
            mode, smooth = "none", False
        return ModelConfig(
            d_emb=self.d_emb, d1=self.d1, d2=self.d2, n_heads=self.n_heads, d_ffn_region=self.d_ffn_region,
            dropout=self.dropout, lambda_c=1.0 if self.no_cla_loss else self.lambda_c, top_k=self.top_k,
            max_input_len=self.max_input_len, max_decode_len=self.max_decode_len, precision=precision,
            smooth_with_match=smooth, filter_mode=mode, classifier_copy=not self.no_cla_loss,
            use_ocr=not self.no_ocr, use_entities=not self.no_entities,
        ).validate()

    def train_config(self, stage=None):
        no_filter = self.no_filter_module
        return TrainConfig(
            learning_rate=self.learning_rate, dropout=self.dropout, batch_size=self.batch_size,
            max_epochs=self.max_epochs, patience=self.patience, seed=self.seed, lambda_c=self.lambda_c,
            stage=self.stage if stage is None else stage, grad_clip=self.grad_clip, eval_every=self.eval_every,
            eval_beam=self.eval_beam,
            use_itm_loss=not (self.no_itm_loss or self.no_itm_match or no_filter),
            use_irtm_loss=not (self.no_irtm_loss or self.no_region_match or no_filter),
            use_cla_loss=not self.no_cla_loss,
        ).validate()

    def synth_kwargs(self):
        return dict(n_samples=self.n_samples, vocab_size=self.synth_vocab_size, n_topics=self.n_topics,
                    noise_region_fraction=self.noise_region_fraction, avg_keyphrases=self.avg_keyphrases,
                    p_present=self.p_present, seed=self.seed)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_BOOLS = {"true": True, "yes": True, "on": True, "1": True, "false": False, "no": False, "off": False, "0": False}


def _convert(key, raw):
    f = _FIELDS.get(key)
    if f is None:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(RunConfig(), key)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in _BOOLS:
                raise ValueError(raw)
            return _BOOLS[raw.lower()]
        if isinstance(default, list):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return [int(x) for x in items] if key == "seeds" else items
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text):
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = line.split("=", 1)
        key = key.strip()
        try:
            values[key] = _convert(key, raw)
        except ConfigError as e:
            raise ConfigError(f"line {n}: {e}") from None
    return values


def load_config(path=None, overrides=None):
    """Defaults, then the file, then ``overrides`` (already-typed or string values)."""
    values = {}
    if path:
        with open(path, encoding="utf-8") as f:
            values.update(parse_config_text(f.read()))
    for key, val in (overrides or {}).items():
        values[key] = _convert(key, val) if isinstance(val, str) else val
    for key in values:
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
    return RunConfig(**values).validate()


def dump_config(cfg):
    lines = []
    for key, val in cfg.to_dict().items():
        if isinstance(val, list):
            val = ",".join(str(x) for x in val)
        elif isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
