"""Multi-environment data generation from a fixed six-variable SCM.

The graph, edge signs, mechanism families, noise laws and intervention
recipes are hard-wired; what varies per setting is the target variable, the
mechanism family, the intervention type/location and the random draws
(noise scales, per-environment shift parameters, coefficients).

Environment 1 is observational, environments 2 and 3 carry the training
interventions, environment 4 uses stronger shifts and is held out to measure
domain generalization.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod

N_VARS = 6
PARENTS: tuple[tuple[int, ...], ...] = ((), (0,), (0, 1), (2,), (), (2, 3, 4))
EDGE_SIGNS: dict[tuple[int, int], float] = {
    (0, 1): +1.0,
    (0, 2): +1.0,
    (1, 2): -1.0,
    (2, 3): -1.0,
    (2, 5): +1.0,
    (4, 5): +1.0,
    (3, 5): -1.0,
}
TOPO_ORDER = (0, 1, 4, 2, 3, 5)
CHILDREN: tuple[tuple[int, ...], ...] = tuple(
    tuple(j for j in range(N_VARS) if i in PARENTS[j]) for i in range(N_VARS)
)

MECHANISMS = ("linear", "tanhshrink", "softplus", "relu", "multnoise")
INTERVENTIONS = ("do", "soft1", "soft2")
LOCATIONS = ("all_except_target", "parents_children")

ENV_IDS = (1, 2, 3, 4)
SEEN_ENVS = (1, 2, 3)
DG_ENV = 4


def parent_signs(i: int) -> tuple[float, ...]:
    return tuple(EDGE_SIGNS[(j, i)] for j in PARENTS[i])


@dataclass(frozen=True)
class ScmSetting:
    """One benchmark configuration plus all of its random draws."""

    target: int  # 0-based variable index
    mechanism: str
    intervention: str
    location: str
    seed: int
    c: tuple[float, ...] = ()  # per-variable noise scales
    e1: tuple[float, ...] = ()  # shift draws for environments 1..3
    e2: tuple[float, ...] = ()  # scale draws for environments 1..3
    env4_sign: tuple[float, ...] = ()  # +-1 per variable for the unseen env
    intervened: tuple[int, ...] = ()
    location_fallback: bool = False
    setting_id: str = ""

    @property
    def parents(self) -> tuple[int, ...]:
        return PARENTS[self.target]

    def meta_dict(self) -> dict:
        return {
            "setting_id": self.setting_id,
            "target": self.target + 1,
            "mechanism": self.mechanism,
            "intervention_type": self.intervention,
            "location": self.location,
            "parents": [p + 1 for p in self.parents],
            "seed": self.seed,
            "c": list(self.c),
            "e1": {str(env): self.e1[env - 1] for env in SEEN_ENVS},
            "e2": {str(env): self.e2[env - 1] for env in SEEN_ENVS},
            "env4_sign": list(self.env4_sign),
            "intervened": [i + 1 for i in self.intervened],
            "location_fallback": self.location_fallback,
        }

    @staticmethod
    def from_meta(meta: dict) -> "ScmSetting":
        return ScmSetting(
            target=int(meta["target"]) - 1,
            mechanism=meta["mechanism"],
            intervention=meta["intervention_type"],
            location=meta["location"],
            seed=int(meta["seed"]),
            c=tuple(meta["c"]),
            e1=tuple(meta["e1"][str(env)] for env in SEEN_ENVS),
            e2=tuple(meta["e2"][str(env)] for env in SEEN_ENVS),
            env4_sign=tuple(meta["env4_sign"]),
            intervened=tuple(int(i) - 1 for i in meta["intervened"]),
            location_fallback=bool(meta.get("location_fallback", False)),
            setting_id=meta.get("setting_id", ""),
        )


@dataclass
class EnvDataset:
    """Sample matrix for one environment with ground-truth metadata."""

    env_id: int
    x: np.ndarray  # (n, 6)
    target: int  # 0-based
    parents: tuple[int, ...]
    setting: ScmSetting | None = None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def y(self) -> np.ndarray:
        return self.x[:, self.target]


@dataclass
class SettingData:
    """Train/test splits for the three seen environments plus the DG set."""

    setting: ScmSetting
    train: list[EnvDataset] = field(default_factory=list)
    test: list[EnvDataset] = field(default_factory=list)
    dg: EnvDataset | None = None


def mechanism_eval(family, parent_values, signs, noise: float) -> float:
    """Scalar structural assignment for one variable."""
    pv = np.asarray(parent_values, dtype=np.float64)
    sg = np.asarray(signs, dtype=np.float64)
    return float(_mech_base(family, pv[None, :], sg, np.array([noise]))[0])


def _mech_base(family: str, parent_cols: np.ndarray, signs: np.ndarray, noise: np.ndarray):
    """Vectorized assignment: parent_cols is (n, p), noise is (n,)."""
    u = parent_cols * signs
    if family == "linear":
        s = u.sum(axis=1)
    elif family == "tanhshrink":
        s = (u - np.tanh(u)).sum(axis=1)
    elif family == "softplus":
        s = np.logaddexp(0.0, u).sum(axis=1)
    elif family == "relu":
        s = np.maximum(u, 0.0).sum(axis=1)
    elif family == "multnoise":
        return u.sum(axis=1) * (1.0 + 0.25 * noise) + noise
    else:
        raise ValueError(f"unknown mechanism family {family!r}")
    return s + noise


def resolve_location(
    target: int, location: str, fallback_rng: np.random.Generator | None = None
) -> tuple[tuple[int, ...], bool]:
    """Map a location name to a concrete intervened-variable set.

    The target itself is never intervened on. An empty parents+children set
    falls back to one random non-target variable (recorded in metadata);
    the fixed graph never triggers this, but the recipe stays total.
    """
    if location == "all_except_target":
        return tuple(i for i in range(N_VARS) if i != target), False
    if location == "parents_children":
        got = tuple(sorted(set(PARENTS[target]) | set(CHILDREN[target])))
        if got:
            return got, False
        rng = fallback_rng or np.random.default_rng(0)
        choices = [i for i in range(N_VARS) if i != target]
        return (int(rng.choice(choices)),), True
    raise ValueError(f"unknown intervention location {location!r}")


def make_setting(
    target: int, mechanism: str, intervention: str, location: str, seed: int, setting_id: str = ""
) -> ScmSetting:
    """Draw the per-setting randomness (noise scales, shifts, signs)."""
    if mechanism not in MECHANISMS:
        raise ValueError(f"unknown mechanism {mechanism!r}")
    if intervention not in INTERVENTIONS:
        raise ValueError(f"unknown intervention {intervention!r}")
    if not 0 <= target < N_VARS:
        raise ValueError(f"target index out of range: {target}")
    c = tuple(rngmod.stream(seed, "c").uniform(0.8, 1.2, N_VARS))
    par = rngmod.stream(seed, "envpar")
    e1, e2 = [], []
    for _ in SEEN_ENVS:
        mag = par.uniform(0.5, 1.5)
        sign = 1.0 if par.random() < 0.5 else -1.0
        e1.append(sign * mag)
        e2.append(par.uniform(1.5, 2.5))
    env4_sign = tuple(
        1.0 if s < 0.5 else -1.0 for s in rngmod.stream(seed, "sign4").random(N_VARS)
    )
    intervened, fallback = resolve_location(
        target, location, rngmod.stream(seed, "fallback")
    )
    sid = setting_id or f"t{target + 1}-{mechanism}-{intervention}-{location}-s{seed}"
    return ScmSetting(
        target=target,
        mechanism=mechanism,
        intervention=intervention,
        location=location,
        seed=seed,
        c=c,
        e1=tuple(e1),
        e2=tuple(e2),
        env4_sign=env4_sign,
        intervened=intervened,
        location_fallback=fallback,
        setting_id=sid,
    )


def sample_environment(
    setting: ScmSetting, env_id: int, n: int, rng: np.random.Generator
) -> EnvDataset:
    """Ancestral sampling of one environment.

    The generator consumes the same draws in the same order for every
    intervention type, so environment 1 is bit-identical across types given
    the same stream.
    """
    if env_id not in ENV_IDS:
        raise ValueError(f"env_id must be one of {ENV_IDS}, got {env_id}")
    z = rng.standard_normal((n, N_VARS))  # mechanism noise cores
    z2 = rng.standard_normal((n, N_VARS))  # additive intervention noise
    x = np.zeros((n, N_VARS))
    kind = setting.intervention
    for i in TOPO_ORDER:
        hit = env_id >= 2 and i in setting.intervened
        # mechanism noise scale, possibly rescaled by a soft-II intervention
        if hit and kind == "soft2":
            if env_id == 2:
                noise = 2.0 * z[:, i]
            elif env_id == 3:
                noise = 0.2 * z[:, i]
            else:  # env 4: half the samples at sd 1.2, half at sd 3
                scale = np.where(np.arange(n) < n // 2, 1.2, 3.0)
                noise = scale * z[:, i]
        else:
            noise = setting.c[i] * z[:, i]

        if hit and kind == "do":
            if env_id == DG_ENV:
                shift = setting.e1[0] + setting.env4_sign[i]
                x[:, i] = shift + 4.0 * z[:, i]
            else:
                x[:, i] = setting.e1[env_id - 1] + setting.e2[env_id - 1] * z[:, i]
            continue

        cols = x[:, PARENTS[i]] if PARENTS[i] else np.zeros((n, 0))
        x[:, i] = _mech_base(setting.mechanism, cols, np.asarray(parent_signs(i)), noise)

        if hit and kind == "soft1":
            if env_id == DG_ENV:
                shift = setting.e1[0] + setting.env4_sign[i]
                x[:, i] += shift + 4.0 * z2[:, i]
            else:
                x[:, i] += setting.e1[env_id - 1] + setting.e2[env_id - 1] * z2[:, i]

    return EnvDataset(
        env_id=env_id,
        x=x,
        target=setting.target,
        parents=setting.parents,
        setting=setting,
    )


def generate_setting_data(
    setting: ScmSetting, n_train: int = 1024, n_test: int = 1024
) -> SettingData:
    """Train/test draws for the seen environments and the held-out env 4."""
    data = SettingData(setting=setting)
    for env in SEEN_ENVS:
        data.train.append(
            sample_environment(
                setting, env, n_train, rngmod.stream(setting.seed, "rows", env, "train")
            )
        )
        data.test.append(
            sample_environment(
                setting, env, n_test, rngmod.stream(setting.seed, "rows", env, "test")
            )
        )
    data.dg = sample_environment(
        setting, DG_ENV, n_test, rngmod.stream(setting.seed, "rows", DG_ENV, "test")
    )
    return data


def enumerate_settings(
    filter: dict | None = None, count: int | None = None, seed: int = 0
) -> list[ScmSetting]:
    """Deterministic enumeration over the benchmark axes.

    `filter` may pin any of target (1-based), mechanism, intervention,
    location. When `count` exceeds the number of filtered combinations the
    enumeration cycles with fresh per-setting draws.
    """
    filter = filter or {}
    targets = list(range(N_VARS))
    mechanisms, interventions, locations = list(MECHANISMS), list(INTERVENTIONS), list(LOCATIONS)
    if "target" in filter:
        targets = [t for t in targets if t == int(filter["target"]) - 1]
    if "mechanism" in filter:
        mechanisms = [m for m in mechanisms if m == str(filter["mechanism"])]
    if "intervention" in filter:
        interventions = [i for i in interventions if i == str(filter["intervention"])]
    if "location" in filter:
        locations = [l for l in locations if l == str(filter["location"])]
    combos = list(itertools.product(targets, mechanisms, interventions, locations))
    if not combos:
        raise ValueError(f"setting filter matched nothing: {filter}")
    total = count if count is not None else len(combos)
    settings = []
    for k in range(total):
        target, mech, interv, loc = combos[k % len(combos)]
        sub_seed = int(
            np.random.SeedSequence(entropy=seed, spawn_key=(0x5E7, k)).generate_state(1)[0]
        )
        sid = f"t{target + 1}-{mech}-{interv}-{'all' if loc == LOCATIONS[0] else 'pc'}-{k:03d}"
        settings.append(make_setting(target, mech, interv, loc, sub_seed, setting_id=sid))
    return settings


def with_seed(setting: ScmSetting, seed: int) -> ScmSetting:
    """Same axes, fresh draws (used for repeated runs of one configuration)."""
    fresh = make_setting(
        setting.target, setting.mechanism, setting.intervention, setting.location, seed
    )
    return replace(fresh, setting_id=setting.setting_id)
