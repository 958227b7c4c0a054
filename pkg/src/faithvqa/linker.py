"""Noun-to-object links and rendering as colored cells plus colored words."""
from __future__ import annotations

import html
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .toyworld import GRID

S1_MIN = 0.5
ALPHA_MIN = 0.2
PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4",
           "#f032e6", "#9a6324", "#469990", "#808000", "#000075", "#aaffc3")


@dataclass
class LinkedToken:
    word: str
    object_id: int | None = None
    color: str | None = None


@dataclass
class MultimodalExplanation:
    tokens: list  # [LinkedToken]
    footprints: dict  # object_id -> [[row, col], ...]
    legend: dict = field(default_factory=dict)  # object_id -> color

    @property
    def links(self) -> set:
        return {(i, t.object_id) for i, t in enumerate(self.tokens) if t.object_id is not None}

    def to_json(self) -> dict:
        return {"tokens": [asdict(t) for t in self.tokens],
                "footprints": {str(k): [list(c) for c in v] for k, v in
                               sorted(self.footprints.items())},
                "legend": {str(k): v for k, v in sorted(self.legend.items())}}

    @classmethod
    def from_json(cls, d: dict) -> "MultimodalExplanation":
        return cls([LinkedToken(**t) for t in d["tokens"]],
                   {int(k): [tuple(c) for c in v] for k, v in d["footprints"].items()},
                   {int(k): v for k, v in d["legend"].items()})


def link_rule(is_noun: bool, s1: float, alpha_max: float) -> bool:
    return bool(is_noun and s1 > S1_MIN and alpha_max > ALPHA_MIN)


def link_words(output, noun_ids, object_ids) -> set:
    """Set of (word index, object_id) pairs; also stored on ``output.links``.

    ``object_ids[i]`` names the object behind attention column i.
    """
    links = set()
    for i, (tok, st) in enumerate(zip(output.tokens, output.steps)):
        alpha = np.asarray(st.alpha)
        if alpha.size and link_rule(tok in noun_ids, st.s[1], float(alpha.max())):
            links.add((i, int(object_ids[int(alpha.argmax())])))
    output.links = links
    return links


def build(output, vocab, scene) -> MultimodalExplanation:
    links = dict(link_words(output, vocab.noun_ids(), scene.object_ids()))
    linked = sorted(set(links.values()))
    legend = {oid: PALETTE[k % len(PALETTE)] for k, oid in enumerate(linked)}
    words = vocab.decode(output.tokens)
    tokens = [LinkedToken(w, links.get(i), legend.get(links.get(i)))
              for i, w in enumerate(words)]
    return MultimodalExplanation(tokens, {o.object_id: list(o.footprint)
                                          for o in scene.objects}, legend)


def render_svg(mm: MultimodalExplanation, cell: int = 20) -> str:
    side = GRID * cell
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{side + 20}" '
             f'height="{side + 60}">',
             f'<rect x="10" y="10" width="{side}" height="{side}" fill="#f4f4f4" '
             f'stroke="#999"/>']
    for oid in sorted(mm.footprints):
        fill = mm.legend.get(oid, "#d0d0d0")
        for r, c in mm.footprints[oid]:
            parts.append(f'<rect x="{10 + c * cell}" y="{10 + r * cell}" width="{cell}" '
                         f'height="{cell}" fill="{fill}" stroke="#fff"/>')
    words = []
    for t in mm.tokens:
        w = html.escape(t.word)
        words.append(f'<tspan fill="{t.color}" font-weight="bold">{w}</tspan>' if t.color
                     else f"<tspan>{w}</tspan>")
    parts.append(f'<text x="10" y="{side + 40}" font-size="16" font-family="sans-serif">'
                 + " ".join(words) + "</text></svg>\n")
    return "\n".join(parts)


def render(mm: MultimodalExplanation, path, fmt: str = "json") -> None:
    path = Path(path)
    if fmt == "json":
        text = json.dumps(mm.to_json(), indent=1, sort_keys=True) + "\n"
    elif fmt == "svg":
        text = render_svg(mm)
    else:
        raise ValueError(f"unknown render format {fmt!r}")
    try:
        path.write_text(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from None
