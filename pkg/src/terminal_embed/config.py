"""Every tunable constant in one flat record.

Desk defaults are chosen so the acceptance runs finish on a laptop core; the
asymptotic values they stand in for are listed in THEORY and written as
comments when a config file is saved.
"""

import dataclasses
import math
from dataclasses import dataclass, fields

from .errors import FormatError


@dataclass
class Config:
    eps: float = 0.2
    eps_dagger_ratio: float = 0.03
    eps_acc: float = 0.5
    delta: float = 0.1
    seed: int = 0

    # sketch
    k: int = 0
    c_k: float = 8.0
    k_max: int = 256
    sketch_retries: int = 8
    certify_factor: float = 2.5

    # adaptive nearest neighbour over the tree
    aann_backend: str = "brute"
    aann_c: float = 1.2
    gamma: float = 0.1
    alpha: float = 3.0
    beta: float = 6.0
    c_range: float = 1.0
    aann_copies: float = 3.0
    aann_lsh_tables: int = 8
    aann_lsh_width: float = 4.0

    # fixed-scale violator detection
    ap_backend: str = "trivial"
    ap_tables: int = 16
    ap_bits: int = 0
    ap_width: float = 4.0
    lifted_backend: str = "brute"
    lifted_tables: int = 24
    lifted_bits: int = 0
    lifted_bits_factor: float = 0.75
    rho_rep: float = 1.0
    c_rep: float = 1.0
    c_ap: float = 1.0
    c_witness: float = 1.0
    delta_witness: float = 0.01
    rho3: float = 1.0
    rho4: float = 1.0
    c_cap: float = 4.0

    # multi-scale ladder
    gamma_t: float = 0.25
    beta_t: float = 1.0

    deterministic_repeat: bool = False
    median_jl: bool = False
    medjl_m: int = 0
    medjl_rows: int = 0
    medjl_samples: int = 0

    @property
    def eps_dagger(self):
        return self.eps_dagger_ratio * self.eps

    def sketch_rows(self, n):
        if self.k:
            return self.k
        return min(self.k_max, max(1, math.ceil(self.c_k * self.eps ** -2 * math.log(max(n, 2)))))

    def with_backend(self, name):
        """Apply a named backend preset: "trivial" or "lsh"."""
        if name not in BACKENDS:
            raise ValueError(f"unknown backend {name!r}")
        return self.replace(**BACKENDS[name])

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in fields(self):
            note = THEORY.get(f.name)
            if note:
                lines.append(f"# {f.name}: {note}")
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, base=None):
        cfg = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        changes = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"config line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise FormatError(f"config line {lineno}: unknown key {key!r}")
            changes[key] = _coerce(types[key], value, lineno)
        return cfg.replace(**changes)

    @classmethod
    def load(cls, path, base=None):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), base)


def _coerce(kind, value, lineno):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            if value.lower() in ("true", "1", "on", "yes"):
                return True
            if value.lower() in ("false", "0", "off", "no"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return value
    except ValueError:
        raise FormatError(f"config line {lineno}: bad {kind} value {value!r}") from None


BACKENDS = {
    "trivial": dict(aann_backend="brute", ap_backend="trivial", lifted_backend="brute", rho_rep=1.0),
    "lsh": dict(aann_backend="lsh", ap_backend="hyperplane-lsh", lifted_backend="lsh", rho_rep=0.5,
                c_ap=0.25, ap_tables=8, aann_copies=1.0),
}

THEORY = {
    "eps_dagger_ratio": "theory: a small enough constant c with eps_dagger = c*eps (1/50 suggested)",
    "k": "theory: O(eps^-2 log n); 0 picks ceil(c_k eps^-2 ln n) capped at k_max",
    "k_max": "desk cap; ellipsoid iterations grow like k^2",
    "certify_factor": "sketch certified at pair distortion <= certify_factor*eps",
    "alpha": "theory: 10 (r_low/r_high exponent)",
    "beta": "theory: 20 (grid snap exponent)",
    "gamma": "theory: Theta(eps^3/log^3 n)",
    "aann_copies": "theory: s = Theta((d + log(l/delta)) log nd); desk s = ceil(aann_copies ln(n/delta))",
    "rho_rep": "theory: memory/repetition exponent in [0, 1]",
    "c_rep": "n_rep = ceil(c_rep n^rho_rep ln(n/delta))",
    "c_ap": "l = ceil(c_ap ln(n/delta)) approximate partitions per scale",
    "c_witness": "p = ceil(c_witness ln(1/delta_witness)) witnesses per set",
    "rho3": "theory: AP exponent rho_3; caps assigned counts at c_cap m^(1-rho_rep+rho3)",
    "rho4": "theory: AP exponent rho_4; caps unassigned counts at c_cap m^rho4",
    "gamma_t": "theory: Theta(1/log^3 n)",
    "beta_t": "theory: 20 (terminal ladder exponent)",
}
