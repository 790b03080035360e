"""Flat key=value configuration shared by every CLI command.

One file carries both model and training settings; keys match the
ModelConfig / TrainConfig field names.  `#` comments and blank lines are
ignored.  Overrides arrive as dotted-free `key=value` strings from the
command line.  Unknown keys are rejected outright — a typo should fail the
run, not silently fall back to a default.  Every run writes the fully
resolved config next to its outputs; feeding that file back reproduces the
run.
"""

import os

from .serialization import decode_kv, encode_kv


class ConfigError(ValueError):
    pass


def _parse_bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_float_list(s):
    if not s.strip():
        raise ConfigError("empty list value")
    return [float(p) for p in s.split(",")]


def _parse_opt_float(s):
    return None if s.strip().lower() == "none" else float(s)


def _parse_opt_str(s):
    return None if s.strip().lower() == "none" else s.strip()


# key -> (parser, default).  The single `seed` drives model init and the
# training streams; sub-streams are split off it deterministically.
SCHEMA = {
    # model
    "vocab_size": (int, 256),
    "D": (int, 64),
    "N": (int, 128),
    "H": (int, 4),
    "L": (int, 2),
    "q": (int, 16),
    "degrees": (_parse_float_list, [2.0, 3.0, 4.0, 5.0]),
    "mechanism": (str, "sko"),
    "tie_embeddings": (_parse_bool, True),
    "mlp_ratio": (int, 4),
    "rms_eps": (float, 1e-6),
    "learn_degrees": (_parse_bool, False),
    # training
    "lr_base": (float, 6e-4),
    "lr_min": (float, 1e-5),
    "weight_decay": (float, 0.1),
    "betas": (_parse_float_list, [0.9, 0.95]),
    "adam_eps": (float, 1e-8),
    "total_steps": (int, 2000),
    "eval_interval": (int, 500),
    "batch_size": (int, 16),
    "grad_clip": (_parse_opt_float, 1.0),
    "seed": (int, 0),
    "dataset": (str, "sample"),
    "val_fraction": (float, 0.1),
    "eval_batches": (int, 20),
    "scheme": (str, "byte"),
    "vocab_file": (_parse_opt_str, None),
    "merges_file": (_parse_opt_str, None),
}


def default_config() -> dict:
    return {k: v for k, (_, v) in SCHEMA.items()}


def _apply(cfg, key, raw, where):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r} ({where})")
    parser = SCHEMA[key][0]
    try:
        cfg[key] = parser(raw)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r} ({where}): {e}") from e


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply command-line key=value strings onto an existing config."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _apply(cfg, key.strip(), raw, "command line")
    return cfg


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the file (if any), then key=value overrides."""
    cfg = default_config()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            for key, raw in decode_kv(fh.read()).items():
                _apply(cfg, key, raw, f"file {path}")
    return apply_overrides(cfg, overrides)


def config_text(cfg: dict) -> str:
    return encode_kv(cfg)


def write_resolved(cfg: dict, out_dir, name="resolved.cfg") -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_text(cfg))
    return path


def build_model_config(cfg: dict):
    from .model import ModelConfig
    return ModelConfig(
        vocab_size=cfg["vocab_size"], D=cfg["D"], N=cfg["N"], H=cfg["H"],
        L=cfg["L"], q=cfg["q"], degrees=cfg["degrees"],
        mechanism=cfg["mechanism"], tie_embeddings=cfg["tie_embeddings"],
        mlp_ratio=cfg["mlp_ratio"], rms_eps=cfg["rms_eps"], seed=cfg["seed"],
        learn_degrees=cfg["learn_degrees"])


def build_train_config(cfg: dict):
    from .trainer import TrainConfig
    return TrainConfig(
        lr_base=cfg["lr_base"], lr_min=cfg["lr_min"],
        weight_decay=cfg["weight_decay"], betas=tuple(cfg["betas"]),
        adam_eps=cfg["adam_eps"], total_steps=cfg["total_steps"],
        eval_interval=cfg["eval_interval"], batch_size=cfg["batch_size"],
        grad_clip=cfg["grad_clip"], seed=cfg["seed"], dataset=cfg["dataset"],
        val_fraction=cfg["val_fraction"], eval_batches=cfg["eval_batches"],
        scheme=cfg["scheme"], vocab_file=cfg["vocab_file"],
        merges_file=cfg["merges_file"])


def flat_from_checkpoint_kv(kv: dict) -> dict:
    """Re-type the config keys stored in a checkpoint's text block."""
    cfg = default_config()
    for key, raw in kv.items():
        if key in SCHEMA:
            _apply(cfg, key, raw, "checkpoint")
    return cfg


def resolve_dataset(path_or_alias: str) -> str:
    """Map the 'sample' alias to the bundled corpus, else pass through."""
    if path_or_alias == "sample":
        return os.path.join(os.path.dirname(__file__), "data", "sample.txt")
    return path_or_alias
