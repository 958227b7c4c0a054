"""Synthetic segmented scenes with questions whose causal objects are known.

Every scene lives on a 14x14 grid. Objects carry a category, a color and a
size, a rectangular footprint and a nonnegative feature vector derived from
those attributes. Questions come from a handful of templates whose semantics
fix both the answer and the set of objects the answer depends on, which is
what lets the rest of the package check attributions against ground truth.
"""
from __future__ import annotations

import json
from functools import lru_cache
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

GRID = 14
FORMAT_VERSION = 1

CATEGORIES = ("cube", "sphere", "cylinder", "cone", "torus", "pyramid", "ring", "disk")
COLORS = ("red", "green", "blue", "yellow", "purple", "gray")
SIZES = ("small", "large")
MAX_COUNT = 4

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
FUNCTION_WORDS = ("is", "there", "a", "what", "color", "size", "the", "how", "many",
                  "are", "because", "no", "?")
TEMPLATES = ("exist", "color", "size", "count")


class SceneGenerationError(RuntimeError):
    pass


class TemplateNotApplicable(Exception):
    """Raised when a template cannot be instantiated for a scene; callers retry."""


class DatasetFormatError(ValueError):
    pass


class DatasetVersionError(DatasetFormatError):
    pass


def plural(name: str) -> str:
    return name + "s"


@dataclass(frozen=True)
class SceneConfig:
    min_objects: int = 3
    max_objects: int = 12
    feature_dim: int = 64
    noise_sigma: float = 0.1
    feature_seed: int = 1234
    # footprint side length per size, in grid cells
    extent: tuple = (2, 3)

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError(f"need 1 <= min_objects <= max_objects, got "
                             f"{self.min_objects}, {self.max_objects}")
        if self.max_objects > 80:
            raise ValueError(f"max_objects={self.max_objects} exceeds the 80-object cap")
        if len(self.extent) != len(SIZES) or min(self.extent) < 1 or max(self.extent) > GRID:
            raise ValueError(f"bad extent {self.extent}")


@dataclass(frozen=True)
class GenConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    templates: tuple = TEMPLATES
    p_distractor: float = 0.5
    test_fraction: float = 0.2
    # causal-set convention for "no" existence answers: "all" objects or "none"
    absent_causal: str = "all"


@dataclass(frozen=True)
class SceneObject:
    object_id: int
    category_id: int
    attribute_ids: tuple  # (color_id, size_id)
    footprint: tuple  # sorted ((row, col), ...)
    features: tuple

    @property
    def color_id(self) -> int:
        return self.attribute_ids[0]

    @property
    def size_id(self) -> int:
        return self.attribute_ids[1]


@dataclass(frozen=True)
class Scene:
    scene_id: int
    objects: tuple

    def __len__(self):
        return len(self.objects)

    def feature_matrix(self) -> np.ndarray:
        return np.array([o.features for o in self.objects], dtype=np.float64)

    def object_ids(self) -> list:
        return [o.object_id for o in self.objects]


@dataclass(frozen=True)
class GoldExplanation:
    tokens: tuple
    is_faithful: bool
    referenced_object_ids: tuple


@dataclass(frozen=True)
class QAItem:
    item_id: int
    scene: Scene
    template: str
    question_tokens: tuple
    answer_id: int
    causal_object_ids: tuple
    gold_explanations: tuple
    split: str = "train"


class Vocabulary:
    """Closed token vocabulary shared by questions and explanations."""

    def __init__(self, tokens, nouns, answers):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.nouns = frozenset(nouns)
        self.answers = list(answers)
        self.answer_index = {a: i for i, a in enumerate(self.answers)}

    @classmethod
    def default(cls) -> "Vocabulary":
        tokens = [PAD, BOS, EOS, *FUNCTION_WORDS, *CATEGORIES, *map(plural, CATEGORIES),
                  *COLORS, *SIZES, *(str(n) for n in range(1, MAX_COUNT + 1))]
        nouns = [*CATEGORIES, *map(plural, CATEGORIES)]
        answers = ["yes", "no", *COLORS, *SIZES, *(str(n) for n in range(1, MAX_COUNT + 1))]
        return cls(tokens, nouns, answers)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return (isinstance(other, Vocabulary) and self.tokens == other.tokens
                and self.nouns == other.nouns and self.answers == other.answers)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def encode(self, words) -> tuple:
        try:
            return tuple(self.index[w] for w in words)
        except KeyError as e:
            raise KeyError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> list:
        return [self.tokens[i] for i in ids]

    def category_token_ids(self) -> list:
        return [self.index[c] for c in CATEGORIES]

    def noun_ids(self) -> frozenset:
        return frozenset(self.index[w] for w in self.nouns)

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "nouns": sorted(self.nouns), "answers": self.answers}

    @classmethod
    def from_json(cls, d) -> "Vocabulary":
        return cls(d["tokens"], d["nouns"], d["answers"])


@dataclass
class Dataset:
    vocab: Vocabulary
    items: list
    seed: int
    config: GenConfig

    def split(self, name: str) -> list:
        return [it for it in self.items if it.split == name]

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.vocab == other.vocab
                and self.items == other.items and self.seed == other.seed
                and self.config == other.config)


@lru_cache(maxsize=8)
def attribute_embeddings(cfg: SceneConfig) -> tuple:
    """Fixed per-category/color/size directions shared by every scene."""
    rng = np.random.default_rng(cfg.feature_seed)
    d = cfg.feature_dim
    return (rng.normal(0.0, 1.0, (len(CATEGORIES), d)),
            rng.normal(0.0, 0.6, (len(COLORS), d)),
            rng.normal(0.0, 0.4, (len(SIZES), d)))


def softplus(x):
    return np.logaddexp(0.0, x)


def object_features(category_id, color_id, size_id, cfg: SceneConfig, rng) -> np.ndarray:
    cat, col, siz = attribute_embeddings(cfg)
    base = 2.0 * (cat[category_id] + col[color_id] + siz[size_id]) - 2.0
    return softplus(base + rng.normal(0.0, cfg.noise_sigma, cfg.feature_dim))


def _place(rng, occupied: np.ndarray, side: int, tries: int = 200):
    for _ in range(tries):
        r, c = rng.integers(0, GRID - side + 1, size=2)
        if not occupied[r:r + side, c:c + side].any():
            occupied[r:r + side, c:c + side] = True
            return tuple((int(r + i), int(c + j)) for i in range(side) for j in range(side))
    return None


def generate_scene(rng: np.random.Generator, cfg: SceneConfig, num_objects: int | None = None,
                   scene_id: int = 0) -> Scene:
    if num_objects is None:
        num_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    if not 1 <= num_objects <= cfg.max_objects:
        raise SceneGenerationError(
            f"num_objects={num_objects} outside [1, {cfg.max_objects}]")
    if num_objects * min(cfg.extent) ** 2 > GRID * GRID:
        raise SceneGenerationError(f"{num_objects} objects cannot fit on a {GRID}x{GRID} grid")
    occupied = np.zeros((GRID, GRID), dtype=bool)
    objects = []
    for oid in range(num_objects):
        cat = int(rng.integers(len(CATEGORIES)))
        color = int(rng.integers(len(COLORS)))
        size = int(rng.integers(len(SIZES)))
        footprint = _place(rng, occupied, cfg.extent[size])
        if footprint is None and size > 0:
            size = 0
            footprint = _place(rng, occupied, cfg.extent[0])
        if footprint is None:
            raise SceneGenerationError(
                f"could not place object {oid} of {num_objects}; grid capacity exhausted")
        feats = object_features(cat, color, size, cfg, rng)
        objects.append(SceneObject(oid, cat, (color, size), footprint,
                                   tuple(float(x) for x in feats)))
    return Scene(scene_id, tuple(objects))


def answer_template(template: str, arg: int, scene: Scene, absent_causal: str = "all"):
    """Evaluate a template against a scene: returns (answer word, causal ids)."""
    same = [o.object_id for o in scene.objects if o.category_id == arg]
    name = CATEGORIES[arg]
    if template == "exist":
        if same:
            return "yes", tuple(same)
        return "no", tuple(scene.object_ids()) if absent_causal == "all" else ()
    if template in ("color", "size"):
        if len(same) != 1:
            raise TemplateNotApplicable(f"need exactly one {name}, scene has {len(same)}")
        obj = scene.objects[same[0]]
        word = COLORS[obj.color_id] if template == "color" else SIZES[obj.size_id]
        return word, tuple(same)
    if template == "count":
        if not 1 <= len(same) <= MAX_COUNT:
            raise TemplateNotApplicable(f"count of {name} is {len(same)}")
        return str(len(same)), tuple(same)
    raise ValueError(f"unknown template {template!r}")


def question_words(template: str, arg: int) -> list:
    name = CATEGORIES[arg]
    return {
        "exist": ["is", "there", "a", name, "?"],
        "color": ["what", "color", "is", "the", name, "?"],
        "size": ["what", "size", "is", "the", name, "?"],
        "count": ["how", "many", plural(name), "are", "there", "?"],
    }[template]


def _describe(template: str, obj: SceneObject, scene: Scene):
    """Explanation words about `obj` in the style of the template, plus referenced ids."""
    name = CATEGORIES[obj.category_id]
    if template == "color":
        return ["because", "the", name, "is", COLORS[obj.color_id]], (obj.object_id,)
    if template == "size":
        return ["because", "the", name, "is", SIZES[obj.size_id]], (obj.object_id,)
    if template == "count":
        same = tuple(o.object_id for o in scene.objects if o.category_id == obj.category_id)
        if len(same) > MAX_COUNT:
            raise TemplateNotApplicable("too many objects to describe by count")
        return ["because", "there", "are", str(len(same)), plural(name)], same
    return ["because", "there", "is", "a", COLORS[obj.color_id], name], (obj.object_id,)


def generate_qa(scene: Scene, rng: np.random.Generator, cfg: GenConfig, vocab: Vocabulary,
                item_id: int = 0, template: str | None = None) -> QAItem:
    if template is None:
        template = cfg.templates[int(rng.integers(len(cfg.templates)))]
    counts = np.bincount([o.category_id for o in scene.objects], minlength=len(CATEGORIES))
    if template == "exist":
        pool = np.flatnonzero(counts) if rng.random() < 0.5 else np.arange(len(CATEGORIES))
    elif template in ("color", "size"):
        pool = np.flatnonzero(counts == 1)
    else:
        pool = np.flatnonzero((counts >= 1) & (counts <= MAX_COUNT))
    if len(pool) == 0:
        raise TemplateNotApplicable(f"no category fits template {template!r}")
    arg = int(pool[int(rng.integers(len(pool)))])
    answer, causal = answer_template(template, arg, scene, cfg.absent_causal)

    if template == "exist" and answer == "no":
        faithful = (["because", "there", "is", "no", CATEGORIES[arg]], ())
    else:
        pick = causal[int(rng.integers(len(causal)))]
        faithful = _describe(template, scene.objects[pick], scene)
    golds = [GoldExplanation(vocab.encode(faithful[0]), True, faithful[1])]

    causal_set = set(causal)
    others = [o for o in scene.objects if o.object_id not in causal_set]
    if others and rng.random() < cfg.p_distractor:
        obj = others[int(rng.integers(len(others)))]
        try:
            words, refs = _describe(template, obj, scene)
        except TemplateNotApplicable:
            words, refs = _describe("exist", obj, scene)
        golds.append(GoldExplanation(vocab.encode(words), False, refs))

    return QAItem(item_id, scene, template, vocab.encode(question_words(template, arg)),
                  vocab.answer_index[answer], tuple(causal), tuple(golds))


def generate_dataset(num_items: int, seed: int, cfg: GenConfig | None = None,
                     max_retries: int = 50) -> Dataset:
    cfg = cfg or GenConfig()
    vocab = Vocabulary.default()
    rng = np.random.default_rng(seed)
    n_test = int(round(num_items * cfg.test_fraction))
    items = []
    for i in range(num_items):
        template = cfg.templates[int(rng.integers(len(cfg.templates)))]
        for _ in range(max_retries):
            scene = generate_scene(rng, cfg.scene, scene_id=i)
            try:
                item = generate_qa(scene, rng, cfg, vocab, item_id=i, template=template)
                break
            except TemplateNotApplicable:
                continue
        else:
            raise SceneGenerationError(f"no applicable template for item {i} "
                                       f"after {max_retries} retries")
        split = "test" if i >= num_items - n_test else "train"
        items.append(QAItem(**{**item.__dict__, "split": split}))
    return Dataset(vocab, items, seed, cfg)


# --- serialization -----------------------------------------------------------

def _config_to_json(cfg: GenConfig) -> dict:
    d = asdict(cfg)
    d["templates"] = list(cfg.templates)
    d["scene"]["extent"] = list(cfg.scene.extent)
    return d


def _config_from_json(d) -> GenConfig:
    scene = SceneConfig(**{**d["scene"], "extent": tuple(d["scene"]["extent"])})
    return GenConfig(**{**d, "scene": scene, "templates": tuple(d["templates"])})


def _item_to_json(item: QAItem) -> dict:
    return {
        "item_id": item.item_id,
        "split": item.split,
        "template": item.template,
        "question": list(item.question_tokens),
        "answer": item.answer_id,
        "causal": list(item.causal_object_ids),
        "explanations": [{"tokens": list(g.tokens), "faithful": g.is_faithful,
                          "refs": list(g.referenced_object_ids)}
                         for g in item.gold_explanations],
        "scene": {"scene_id": item.scene.scene_id, "objects": [
            {"id": o.object_id, "category": o.category_id, "attributes": list(o.attribute_ids),
             "footprint": [list(c) for c in o.footprint], "features": list(o.features)}
            for o in item.scene.objects]},
    }


def _item_from_json(d) -> QAItem:
    objs = tuple(SceneObject(o["id"], o["category"], tuple(o["attributes"]),
                             tuple(tuple(c) for c in o["footprint"]), tuple(o["features"]))
                 for o in d["scene"]["objects"])
    golds = tuple(GoldExplanation(tuple(g["tokens"]), g["faithful"], tuple(g["refs"]))
                  for g in d["explanations"])
    return QAItem(d["item_id"], Scene(d["scene"]["scene_id"], objs), d["template"],
                  tuple(d["question"]), d["answer"], tuple(d["causal"]), golds, d["split"])


def dataset_header(ds: Dataset) -> dict:
    return {"format": "faithvqa-dataset", "version": FORMAT_VERSION, "seed": ds.seed,
            "num_items": len(ds.items), "config": _config_to_json(ds.config),
            "vocab": ds.vocab.to_json()}


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "w") as f:
        f.write(json.dumps(dataset_header(ds), sort_keys=True) + "\n")
        for item in ds.items:
            f.write(json.dumps(_item_to_json(item), sort_keys=True) + "\n")


def read_dataset(path) -> Dataset:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}:1: bad header: {e}") from None
    if header.get("format") != "faithvqa-dataset":
        raise DatasetFormatError(f"{path}:1: not a dataset file")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetVersionError(
            f"{path}: format version {header.get('version')} != {FORMAT_VERSION}")
    items = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            items.append(_item_from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DatasetFormatError(f"{path}:{lineno}: bad record ({e!r})") from None
    if len(items) != header["num_items"]:
        raise DatasetFormatError(
            f"{path}: expected {header['num_items']} records, found {len(items)} (truncated?)")
    return Dataset(Vocabulary.from_json(header["vocab"]), items, header["seed"],
                   _config_from_json(header["config"]))
