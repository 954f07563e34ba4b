"""Flat key=value configuration files.

One key per line, ``#`` starts a comment, unknown keys are errors. The
same file may carry model, training, and generator settings; each consumer
reads its own prefix. ``trajmoe config --dump`` prints every key with its
default.
"""

from __future__ import annotations

import numpy as np

from .cohort import GenConfig
from .errors import ConfigError
from .ignd import IgndConfig
from .local_expert import LocalExpertConfig
from .moe import ModelConfig
from .training import TrainConfig


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _int(s: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise ConfigError(f"expected an integer, got {s!r}") from None


def _float(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise ConfigError(f"expected a number, got {s!r}") from None
    if not np.isfinite(v):
        raise ConfigError(f"expected a finite number, got {s!r}")
    return v


def _str(s: str) -> str:
    return s.strip()


def _ints(s: str) -> tuple[int, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(_int(p) for p in s.split(","))


def _floats(s: str) -> tuple[float, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(_float(p) for p in s.split(","))


# key -> (caster, default)
SCHEMA: dict[str, tuple] = {
    # model
    "model.t_horizon": (_float, 12.0),
    "model.step": (_float, 0.1),
    "model.gate_hidden": (_int, 16),
    "model.gate_init_bias": (_floats, (2.0, 0.0, 0.0)),
    "model.gate_time_dependent": (_bool, True),
    "model.physical_only": (_bool, False),
    "model.learn_v": (_bool, False),
    "model.freeze_mech": (_bool, False),
    "model.mech_k_init": (_float, 0.1),
    "model.mech_alpha_init": (_float, 0.5),
    "model.c0_base": (_float, 0.05),
    "model.c0_seed_value": (_float, 0.25),
    "model.seed_regions": (_ints, (0,)),
    "model.ignd_latent_dim": (_int, 16),
    "model.ignd_encoder_widths": (_ints, (32,)),
    "model.ignd_prop_hidden": (_int, 16),
    "model.ignd_prop_out": (_int, 16),
    "model.ignd_dec_widths": (_ints, (32,)),
    "model.ignd_time_encoding": (_str, "scalar-append"),
    "model.ignd_mask_to_support": (_bool, False),
    "model.local_hidden_widths": (_ints, (32, 32)),
    "model.local_activation": (_str, "tanh"),
    "model.local_time_input": (_bool, False),
    # training
    "train.lambda1": (_float, 1e-2),
    "train.lambda2": (_float, 1e-3),
    "train.learning_rate": (_float, 1e-3),
    "train.inner_epochs": (_int, 20),
    "train.max_outer_iters": (_int, 50),
    "train.convergence_tol": (_float, 1e-3),
    "train.seed": (_int, 0),
    "train.val_size": (_int, 35),
    "train.test_size": (_int, 35),
    "train.ortho_on_grid": (_bool, False),
    "train.error_map_bins": (_int, 4),
    # generator
    "gen.n_regions": (_int, 8),
    "gen.graph": (_str, "ring"),
    "gen.n_subjects": (_int, 60),
    "gen.t_horizon": (_float, 12.0),
    "gen.step": (_float, 0.1),
    "gen.dynamics": (_str, "mechanistic"),
    "gen.k": (_float, 0.2),
    "gen.alpha": (_float, 0.8),
    "gen.seed_regions": (_ints, (0,)),
    "gen.c0_base": (_float, 0.05),
    "gen.c0_seed_value": (_float, 0.25),
    "gen.noise_sd": (_float, 0.01),
    "gen.gap_lo": (_float, 0.5),
    "gen.gap_hi": (_float, 2.0),
    "gen.two_scan_prob": (_float, 0.5),
    "gen.regime_steepness": (_float, 2.0),
    "gen.checkpoint": (_str, ""),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Typed config dict: defaults overlaid with the file's assignments."""
    out = {k: v for k, (_, v) in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        caster = SCHEMA[key][0]
        try:
            out[key] = caster(val)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {key}: {e}") from None
    return out


def load_config(path=None) -> dict:
    if path is None:
        return {k: v for k, (_, v) in SCHEMA.items()}
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text, source=str(path))


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_defaults() -> str:
    lines = [f"{k}={format_value(v)}" for k, (_, v) in sorted(SCHEMA.items())]
    return "\n".join(lines) + "\n"


def model_config_from(cfg: dict, n: int) -> ModelConfig:
    gib = cfg["model.gate_init_bias"]
    if len(gib) != 3:
        raise ConfigError("model.gate_init_bias needs exactly 3 values")
    return ModelConfig(
        n=n,
        t_horizon=cfg["model.t_horizon"],
        step=cfg["model.step"],
        ignd=IgndConfig(
            latent_dim=cfg["model.ignd_latent_dim"],
            encoder_widths=cfg["model.ignd_encoder_widths"],
            prop_hidden=cfg["model.ignd_prop_hidden"],
            prop_out=cfg["model.ignd_prop_out"],
            dec_widths=cfg["model.ignd_dec_widths"],
            time_encoding=cfg["model.ignd_time_encoding"],
            mask_to_support=cfg["model.ignd_mask_to_support"],
        ),
        local=LocalExpertConfig(
            hidden_widths=cfg["model.local_hidden_widths"],
            activation=cfg["model.local_activation"],
            time_input=cfg["model.local_time_input"],
        ),
        gate_hidden=cfg["model.gate_hidden"],
        gate_init_bias=tuple(gib),
        gate_time_dependent=cfg["model.gate_time_dependent"],
        physical_only=cfg["model.physical_only"],
        learn_v=cfg["model.learn_v"],
        freeze_mech=cfg["model.freeze_mech"],
        mech_k_init=cfg["model.mech_k_init"],
        mech_alpha_init=cfg["model.mech_alpha_init"],
        c0_base=cfg["model.c0_base"],
        c0_seed_value=cfg["model.c0_seed_value"],
        seed_regions=cfg["model.seed_regions"],
    )


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lambda1=cfg["train.lambda1"],
        lambda2=cfg["train.lambda2"],
        learning_rate=cfg["train.learning_rate"],
        inner_epochs=cfg["train.inner_epochs"],
        max_outer_iters=cfg["train.max_outer_iters"],
        convergence_tol=cfg["train.convergence_tol"],
        seed=cfg["train.seed"],
        val_size=cfg["train.val_size"],
        test_size=cfg["train.test_size"],
        ortho_on_grid=cfg["train.ortho_on_grid"],
        error_map_bins=cfg["train.error_map_bins"],
    )


def gen_config_from(cfg: dict) -> GenConfig:
    return GenConfig(
        n_regions=cfg["gen.n_regions"],
        graph=cfg["gen.graph"],
        n_subjects=cfg["gen.n_subjects"],
        t_horizon=cfg["gen.t_horizon"],
        step=cfg["gen.step"],
        dynamics=cfg["gen.dynamics"],
        k=cfg["gen.k"],
        alpha=cfg["gen.alpha"],
        seed_regions=cfg["gen.seed_regions"],
        c0_base=cfg["gen.c0_base"],
        c0_seed_value=cfg["gen.c0_seed_value"],
        noise_sd=cfg["gen.noise_sd"],
        gap_lo=cfg["gen.gap_lo"],
        gap_hi=cfg["gen.gap_hi"],
        two_scan_prob=cfg["gen.two_scan_prob"],
        regime_steepness=cfg["gen.regime_steepness"],
        checkpoint=cfg["gen.checkpoint"],
    )
