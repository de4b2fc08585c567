"""Synthetic grounded-scene corpus, splits, vocabulary and dataset files.

A scene holds 1-3 objects of distinct coarse categories plus background
distractor regions. Each region's feature vector is

    [category one-hot | sub-category one-hot | plural bit | zero padding] + noise

and the caption is a deterministic template over the objects, e.g.
``a cat sitting on some couches``. Object words are VISUAL tokens pointing at
their region; everything else is TEXTUAL.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"
RESERVED = (BOS, EOS, UNK)

# caption order of the coarse categories
CATEGORIES = ("animal", "vehicle", "furniture", "food")
BACKGROUND = "background"

DEFAULT_LEXICON = (
    ("animal", "cat", "cats"),
    ("animal", "dog", "dogs"),
    ("animal", "horse", "horses"),
    ("animal", "zebra", "zebras"),
    ("vehicle", "bike", "bikes"),
    ("vehicle", "bus", "buses"),
    ("vehicle", "car", "cars"),
    ("furniture", "bed", "beds"),
    ("furniture", "chair", "chairs"),
    ("furniture", "couch", "couches"),
    ("food", "donut", "donuts"),
    ("food", "cake", "cakes"),
    ("food", "pizza", "pizzas"),
)

DETERMINERS = ("a", "some")  # singular, plural
VERBS = {"animal": "sitting", "vehicle": "parked", "furniture": "standing", "food": "served"}
PREPOSITIONS = {"animal": "near", "vehicle": "beside", "furniture": "on", "food": "with"}


class Visual(NamedTuple):
    region: int
    plural: int  # 0 singular, 1 plural
    subcat: int


class DatasetError(ValueError):
    pass


@dataclass
class SceneRecord:
    id: int
    features: np.ndarray  # V, (K, d_v)
    conv_features: np.ndarray  # Vbar, (K, d_v)
    categories: list[str]
    tokens: list[str]
    grounding: list[Visual | None]

    @property
    def k(self) -> int:
        return self.features.shape[0]

    @property
    def visual_steps(self) -> list[int]:
        return [i for i, g in enumerate(self.grounding) if g is not None]

    def __eq__(self, other):
        if not isinstance(other, SceneRecord):
            return NotImplemented
        return (self.id == other.id and self.categories == other.categories and self.tokens == other.tokens
                and self.grounding == other.grounding
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.conv_features, other.conv_features))

    def validate(self) -> None:
        if self.features.ndim != 2 or self.features.shape != self.conv_features.shape:
            raise DatasetError(f"scene {self.id}: feature shapes {self.features.shape} / {self.conv_features.shape}")
        if len(self.categories) != self.k:
            raise DatasetError(f"scene {self.id}: {len(self.categories)} categories for {self.k} regions")
        if len(self.grounding) != len(self.tokens):
            raise DatasetError(f"scene {self.id}: grounding and tokens differ in length")
        for g in self.grounding:
            if g is not None and not (0 <= g.region < self.k):
                raise DatasetError(f"scene {self.id}: grounding region {g.region} outside 0..{self.k - 1}")
            if g is not None and g.plural not in (0, 1):
                raise DatasetError(f"scene {self.id}: plurality must be 0 or 1")


@dataclass
class CorpusConfig:
    k_min: int = 3
    k_max: int = 6
    min_objects: int = 1
    max_objects: int = 3
    noise: float = 0.1
    d_v: int = 20
    lexicon: tuple = DEFAULT_LEXICON

    def validate(self) -> None:
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError(f"need 1 <= k_min <= k_max, got {self.k_min}, {self.k_max}")
        cats = {c for c, _, _ in self.lexicon}
        if not set(CATEGORIES) <= cats:
            raise ValueError(f"lexicon must cover every category {CATEGORIES}")
        if not 1 <= self.min_objects <= self.max_objects <= min(len(CATEGORIES), self.k_max):
            raise ValueError("object counts must satisfy 1 <= min <= max <= min(#categories, k_max)")
        if self.d_v < self.base_dim:
            raise ValueError(f"d_v={self.d_v} too small for {self.base_dim} one-hot feature slots")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    @property
    def base_dim(self) -> int:
        return len(CATEGORIES) + 1 + len(self.lexicon) + 1


def region_base(category: str, subcat: int | None, plural: int, cfg: CorpusConfig) -> np.ndarray:
    v = np.zeros(cfg.d_v)
    cats = CATEGORIES + (BACKGROUND,)
    v[cats.index(category)] = 1.0
    if subcat is not None:
        v[len(cats) + subcat] = 1.0
    v[len(cats) + len(cfg.lexicon)] = float(plural)
    return v


def caption(objects: Sequence[tuple[str, int, int, int]], lexicon=DEFAULT_LEXICON):
    """Template caption for objects ``(category, subcat, plural, region)`` in caption order."""
    tokens: list[str] = []
    grounding: list[Visual | None] = []

    def text(*words):
        tokens.extend(words)
        grounding.extend([None] * len(words))

    def obj(subcat, plural, region):
        text(DETERMINERS[plural])
        tokens.append(lexicon[subcat][1 + plural])
        grounding.append(Visual(region, plural, subcat))

    cat0, sc0, pl0, r0 = objects[0]
    obj(sc0, pl0, r0)
    text(VERBS[cat0])
    if len(objects) == 1:
        text("here")
    for i, (cat, sc, pl, r) in enumerate(objects[1:]):
        text(PREPOSITIONS[cat] if i == 0 else "and")
        obj(sc, pl, r)
    return tokens, grounding


def gen_corpus(seed: int, n_scenes: int, config: CorpusConfig | None = None) -> list[SceneRecord]:
    cfg = config or CorpusConfig()
    cfg.validate()
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    rng = np.random.default_rng(seed)
    by_cat = {c: [i for i, (cc, _, _) in enumerate(cfg.lexicon) if cc == c] for c in CATEGORIES}
    records = []
    for sid in range(n_scenes):
        n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        cats = sorted(rng.choice(len(CATEGORIES), size=n_obj, replace=False).tolist())
        K = int(rng.integers(max(cfg.k_min, n_obj), cfg.k_max + 1))
        slots = rng.permutation(K)[:n_obj].tolist()
        categories = [BACKGROUND] * K
        bases = [region_base(BACKGROUND, None, 0, cfg) for _ in range(K)]
        objects = []
        for ci, region in zip(cats, slots):
            cat = CATEGORIES[ci]
            subcat = int(rng.choice(by_cat[cat]))
            plural = int(rng.integers(2))
            categories[region] = cat
            bases[region] = region_base(cat, subcat, plural, cfg)
            objects.append((cat, subcat, plural, region))
        base = np.stack(bases)
        V = base + cfg.noise * rng.standard_normal(base.shape)
        Vbar = base + cfg.noise * rng.standard_normal(base.shape)
        tokens, grounding = caption(objects, cfg.lexicon)
        records.append(SceneRecord(sid, V, Vbar, categories, tokens, grounding))
    return records


# ---------------------------------------------------------------- splits

SPLIT_MODES = ("standard", "novel", "robust")


def _standard(records, rng):
    n = len(records)
    order = rng.permutation(n)
    n_train = max(1, int(round(0.8 * n))) if n else 0
    n_val = int(round(0.1 * n))
    n_val = min(n_val, n - n_train)
    pick = lambda ix: [records[i] for i in sorted(ix)]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


def mentions_word(record: SceneRecord, words: Sequence[str], lexicon=DEFAULT_LEXICON) -> bool:
    forms = {f for sc in lexicon if sc[1] in words for f in sc[1:]} | set(words)
    return any(t in forms for t in record.tokens)


def has_pair(record: SceneRecord, pair: Sequence[str]) -> bool:
    return all(c in record.categories for c in pair)


def split_corpus(records: Sequence[SceneRecord], mode: str = "standard", seed: int = 0,
                 novel_words: Sequence[str] = ("zebra",), heldout_pair: Sequence[str] = ("animal", "furniture"),
                 lexicon=DEFAULT_LEXICON):
    """(train, val, test) lists.

    novel: scenes whose caption names any of ``novel_words`` (either number)
    go only to val/test. robust: scenes containing both categories of
    ``heldout_pair`` go only to val/test. Remaining scenes split 80/10/10.
    """
    if not records:
        raise ValueError("cannot split an empty corpus")
    if mode not in SPLIT_MODES:
        raise ValueError(f"unknown split mode {mode!r}")
    rng = np.random.default_rng(seed)
    if mode == "standard":
        return _standard(list(records), rng)
    if mode == "novel":
        held = [mentions_word(r, novel_words, lexicon) for r in records]
    else:
        held = [has_pair(r, heldout_pair) for r in records]
    rest = [r for r, h in zip(records, held) if not h]
    out = [r for r, h in zip(records, held) if h]
    if not rest:
        raise ValueError(f"{mode} split impossible: every scene is held out of training")
    train, val, test = _standard(rest, rng)
    order = rng.permutation(len(out))
    half = len(out) // 2
    val = sorted(val + [out[i] for i in order[:half]], key=lambda r: r.id)
    test = sorted(test + [out[i] for i in order[half:]], key=lambda r: r.id)
    return train, val, test


# ---------------------------------------------------------------- vocabulary

@dataclass
class Vocab:
    """Reserved tokens, then textual tokens, then visual words.

    Textual ids are ``0..n_textual-1`` so a textual id doubles as its column
    in the textual distribution.
    """

    tokens: list[str]
    n_textual: int
    lexicon: tuple = DEFAULT_LEXICON
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if tuple(self.tokens[:3]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        self.lexicon = tuple(tuple(x) for x in self.lexicon)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return (isinstance(other, Vocab) and self.tokens == other.tokens and self.n_textual == other.n_textual
                and self.lexicon == other.lexicon)

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def token(self, i: int) -> str:
        return self.tokens[i]

    @property
    def n_subcats(self) -> int:
        return len(self.lexicon)

    def word_for(self, subcat: int, plural: int) -> int:
        return self.index[self.lexicon[subcat][1 + plural]]

    @property
    def subcat_words(self) -> np.ndarray:
        """Ids of the singular sub-category words (rows of U)."""
        return np.array([self.index[s] for _, s, _ in self.lexicon], dtype=np.intp)

    @property
    def slot_words(self) -> np.ndarray:
        """(C, 2) table of word ids by sub-category and plurality."""
        return np.array([[self.index[s], self.index[p]] for _, s, p in self.lexicon], dtype=np.intp)


def build_vocab(records: Sequence[SceneRecord], lexicon=DEFAULT_LEXICON) -> Vocab:
    visual = {f for _, s, p in lexicon for f in (s, p)}
    textual = set()
    for r in records:
        for tok, g in zip(r.tokens, r.grounding):
            if g is None:
                textual.add(tok)
            else:
                visual.add(tok)
    textual -= set(RESERVED)
    overlap = textual & visual
    if overlap:
        raise ValueError(f"tokens used both as textual and visual words: {sorted(overlap)}")
    tokens = list(RESERVED) + sorted(textual) + sorted(visual)
    return Vocab(tokens, len(RESERVED) + len(textual), lexicon)


def write_vocab(vocab: Vocab, directory) -> None:
    d = Path(directory)
    (d / "vocab.txt").write_text("".join(t + "\n" for t in vocab.tokens), encoding="utf-8")
    (d / "lexicon.tsv").write_text("".join("\t".join(row) + "\n" for row in vocab.lexicon), encoding="utf-8")


def read_vocab(directory) -> Vocab:
    d = Path(directory)
    tokens = (d / "vocab.txt").read_text(encoding="utf-8").splitlines()
    lexicon = tuple(tuple(line.split("\t")) for line in (d / "lexicon.tsv").read_text(encoding="utf-8").splitlines()
                    if line)
    visual = {f for _, s, p in lexicon for f in (s, p)}
    n_textual = sum(1 for t in tokens if t not in visual)
    return Vocab(tokens, n_textual, lexicon)


# ---------------------------------------------------------------- dataset files

FIELDS = ("id", "k", "categories", "features", "conv_features", "tokens", "grounding")


def record_to_json(r: SceneRecord) -> str:
    obj = {
        "id": r.id,
        "k": r.k,
        "categories": r.categories,
        "features": r.features.tolist(),
        "conv_features": r.conv_features.tolist(),
        "tokens": r.tokens,
        "grounding": [None if g is None else list(g) for g in r.grounding],
    }
    return json.dumps(obj, separators=(",", ":"))


def record_from_json(line: str) -> SceneRecord:
    obj = json.loads(line)
    missing = [f for f in FIELDS if f not in obj]
    if missing:
        raise DatasetError(f"missing fields {missing}")
    feats = np.asarray(obj["features"], dtype=np.float64)
    conv = np.asarray(obj["conv_features"], dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != obj["k"]:
        raise DatasetError(f"k={obj['k']} does not match features of shape {feats.shape}")
    grounding = [None if g is None else Visual(*(int(x) for x in g)) for g in obj["grounding"]]
    r = SceneRecord(int(obj["id"]), feats, conv, list(obj["categories"]), list(obj["tokens"]), grounding)
    r.validate()
    return r


def write_dataset(records: Sequence[SceneRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(record_to_json(r) + "\n")


def read_dataset(path) -> list[SceneRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(record_from_json(line))
            except (ValueError, TypeError, KeyError) as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
    return records
