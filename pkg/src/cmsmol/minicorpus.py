"""Deterministic fragment grammar that produces the bundled mini-corpus of
drug-like SMILES (ring systems joined by linkers, decorated with common
substituents).  Run ``python -m cmsmol.minicorpus`` to regenerate
``data/mini_corpus.smi``."""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from .smiles import is_valid

RINGS = (
    "c{R}ccc({S})cc{R}", "c{R}cc({S})ccc{R}", "c{R}ccnc({S})c{R}", "c{R}cnc({S})nc{R}",
    "c{R}ccc({S})s{R}", "c{R}ccc({S})o{R}", "c{R}cc({S})c[nH]{R}", "c{R}nc({S})cs{R}",
    "C{R}CCC({S})CC{R}", "C{R}CCN({S})CC{R}", "N{R}CCN({S})CC{R}", "C{R}C({S})C{R}",
    "C{R}CC({S})C{R}", "N{R}CCOCC{R}", "c{R}ccc{Q}[nH]cc({S})c{Q}c{R}", "c{R}ccc{Q}cc({S})ccc{Q}c{R}",
    "C{R}CC{Q}CC({S})CC{Q}C{R}", "[C@@H]{R}CCCN{R}C({S})=O",
)
LINKERS = ("", "C", "CC", "O", "N", "C(=O)N", "NC(=O)", "S(=O)(=O)N", "OC", "/C=C/", "C(=O)",
           "[C@H](C)N", "CO", "NC(=O)N")
SUBSTITUENTS = ("C", "CC", "O", "OC", "N", "F", "Cl", "Br", "C(=O)O", "C(=O)N", "C#N",
                "[N+](=O)[O-]", "S(=O)(=O)N", "C(F)(F)F", "OCC", "NC(=O)C", "C(C)C", "N(C)C",
                "C(=O)OC", "[O-]", "SC")
HEADS = ("", "", "C", "CC(=O)N", "COC(=O)", "O=C(O)", "NC", "CN(C)C")


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.label = 0

    def pick(self, options):
        return options[int(self.rng.integers(len(options)))]

    def ring(self, depth: int) -> str:
        template = self.pick(RINGS)
        labels = {}
        for key in ("R", "Q"):
            if "{" + key + "}" in template:
                self.label += 1
                labels[key] = str(self.label) if self.label < 10 else f"%{self.label}"
        if depth < 2 and self.rng.random() < 0.6:
            slot = self.pick(LINKERS) + self.ring(depth + 1)
        elif self.rng.random() < 0.75:
            slot = self.pick(SUBSTITUENTS)
        else:
            slot = None
        out = template.replace("{R}", labels.get("R", "")).replace("{Q}", labels.get("Q", ""))
        return out.replace("({S})", f"({slot})" if slot else "")

    def molecule(self) -> str:
        self.label = 0
        head = self.pick(HEADS)
        body = self.ring(0)
        tail = self.pick(SUBSTITUENTS) if self.rng.random() < 0.3 else ""
        if tail and body[-1].isdigit():
            return head + body + tail
        return head + body


def build(n: int = 2400, seed: int = 20240601, min_len: int = 16, max_len: int = 70) -> list[str]:
    """``n`` unique valid SMILES with lengths in [min_len, max_len], in draw order."""
    builder = _Builder(np.random.default_rng(seed))
    seen, out = set(), []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n:
            raise RuntimeError("grammar cannot produce enough distinct molecules")
        s = builder.molecule()
        if s in seen or not min_len <= len(s) <= max_len:
            continue
        seen.add(s)
        if is_valid(s).valid:
            out.append(s)
    return out


def default_path() -> Path:
    return Path(__file__).with_name("data") / "mini_corpus.smi"


def load(path=None) -> list[str]:
    p = Path(path) if path else default_path()
    return [line.strip() for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    path = Path(argv[0]) if argv else default_path()
    path.write_text("\n".join(build()) + "\n", encoding="utf-8")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
