"""Run configuration files.

Configs are TOML documents written as flat ``key = value`` lines with
dotted section names, for example::

    variant = "NoROTA"
    K = 30
    lambda = 0.4
    channel.snr_db = 0
    straggler.fraction = 0.5
    model.kind = "logistic"

See the README for every recognised key. Unknown keys are rejected.
"""
from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path

from . import channel as ch
from .exceptions import ConfigError
from .protocol import DataSource, ModelConfig, RunConfig, StragglerModel, variant_config

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["load_config_file", "parse_config_text", "resolve_config", "config_hash",
           "set_key", "AXIS_KEYS"]

_TOP = {"variant": str, "K": int, "K_hat": int, "E": int, "T": int, "lambda": float,
        "eta": float, "batch": int, "pi": float, "master_seed": int, "snr_db": float,
        "eval_every": int, "track_gamma": bool, "track_zeta": bool}
_SECTIONS = {
    "channel": {"P": float, "sigma2": float, "snr_db": float, "fading": bool, "r_hat": float,
                "participation": float, "precoding": str, "baseband": str},
    "straggler": {"fraction": float, "policy": str, "fixed": bool},
    "model": {"kind": str, "hidden": list, "activation": str},
    "data": {"source": str, "n": int, "m": int, "C": int, "separation": float, "seed": int,
             "path": str, "label_column": str, "features": list, "normalize": bool,
             "test_fraction": float},
}

# sweep axis name -> dotted config key
AXIS_KEYS = {"snr_db": "channel.snr_db", "pi": "pi", "straggler_fraction": "straggler.fraction",
             "lambda": "lambda", "r_hat": "channel.r_hat"}


def _coerce(key, value, kind):
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if kind is bool and isinstance(value, bool):
        return value
    if kind is str and isinstance(value, str):
        return value
    if kind is list and isinstance(value, (list, tuple)):
        return list(value)
    if kind is list and isinstance(value, (int, str)) and not isinstance(value, bool):
        # "32,16" or a single width
        parts = str(value).split(",")
        return [p.strip() for p in parts if p.strip()]
    raise ConfigError(f"expected {kind.__name__}, got {value!r}", field=key)


def _validated(raw: dict) -> dict:
    out = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError("expected a section of dotted keys", field=key)
            sec = {}
            for sub, v in value.items():
                full = f"{key}.{sub}"
                if sub not in _SECTIONS[key]:
                    raise ConfigError("unknown key", field=full)
                sec[sub] = _coerce(full, v, _SECTIONS[key][sub])
            out[key] = sec
        elif key in _TOP:
            out[key] = _coerce(key, value, _TOP[key])
        else:
            raise ConfigError("unknown key", field=key)
    return out


def parse_config_text(text: str) -> dict:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    return _validated(raw)


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    raw = parse_config_text(text)
    data = raw.get("data", {})
    if "path" in data and not Path(data["path"]).is_absolute():
        data["path"] = str((path.parent / data["path"]).resolve())
    return raw


def set_key(raw: dict, dotted: str, value) -> dict:
    """Copy of ``raw`` with ``dotted`` set to ``value``."""
    raw = copy.deepcopy(raw)
    # drop keys that would contradict the new value
    if dotted == "channel.snr_db":
        raw.pop("snr_db", None)
        raw.get("channel", {}).pop("sigma2", None)
    if dotted == "channel.r_hat":
        raw.get("channel", {}).pop("participation", None)
    if "." in dotted:
        sec, sub = dotted.split(".", 1)
        raw.setdefault(sec, {})[sub] = value
    else:
        raw[dotted] = value
    return _validated(raw)


def resolve_config(raw: dict, seed_override=None) -> RunConfig:
    """Build the effective :class:`RunConfig` from a validated key tree.

    The noise level comes from ``channel.sigma2`` or from an SNR in dB
    (``channel.snr_db`` or top-level ``snr_db``, default 0 dB); giving both
    is an error. ``channel.participation`` sets ``r_hat`` so that each
    client clears the fading threshold with that probability. The named
    variant is applied last.
    """
    raw = _validated(raw)
    chan = dict(raw.get("channel", {}))
    strag = raw.get("straggler", {})
    mdl = raw.get("model", {})
    data = raw.get("data", {})

    snr = chan.pop("snr_db", None)
    if "snr_db" in raw:
        if snr is not None:
            raise ConfigError("given both at top level and in channel", field="snr_db")
        snr = raw["snr_db"]
    if snr is not None and "sigma2" in chan:
        raise ConfigError("set either channel.sigma2 or an SNR in dB, not both", field="channel.sigma2")
    if "participation" in chan:
        if "r_hat" in chan:
            raise ConfigError("set either r_hat or participation, not both", field="channel.participation")
        try:
            chan["r_hat"] = ch.r_hat_for_participation(chan.pop("participation"))
        except ValueError as exc:
            raise ConfigError(str(exc), field="channel.participation") from None
    if "precoding" in chan:
        chan["precoding_mode"] = chan.pop("precoding")
    if snr is None and "sigma2" not in chan:
        snr = 0.0

    try:
        model = ModelConfig(mdl.get("kind", "logistic"), tuple(mdl.get("hidden", ())),
                            mdl.get("activation", "tanh"))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc), field="model.hidden") from None
    if "features" in data:
        data["features"] = tuple(str(f) for f in data["features"])
    cfg = RunConfig(
        variant="NoROTA",
        K=raw.get("K", 30),
        K_hat=raw.get("K_hat"),
        E=raw.get("E", 3),
        T=raw.get("T", 100),
        lam=raw.get("lambda", 0.4),
        eta=raw.get("eta"),
        batch=raw.get("batch", 64),
        pi=raw.get("pi", 0.5),
        straggler=StragglerModel(**strag),
        channel=ch.ChannelConfig(**chan),
        model=model,
        data=DataSource(**data),
        master_seed=raw.get("master_seed", 0) if seed_override is None else int(seed_override),
        eval_every=raw.get("eval_every", 1),
        track_gamma=raw.get("track_gamma", True),
        track_zeta=raw.get("track_zeta", False),
    )
    try:
        spec = cfg.model_spec()
    except ValueError as exc:
        raise ConfigError(str(exc), field="model") from None
    if snr is not None:
        cfg = cfg.with_snr_db(snr, spec.d)
    return variant_config(raw.get("variant", "NoROTA"), cfg)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
