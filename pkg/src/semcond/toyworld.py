"""Synthetic compositional scenes, their renders, prompts, and the judge.

A scene places 1-4 colored shapes on a 4x4 grid. Everything downstream is
deterministic: rendering is seed-free, the prompt grammar is a bijection
onto scenes, the frozen pseudo language model is a pure function of its
seed, and the answer oracle classifies shapes from per-cell color masks, so
any score below 1.0 on generated images is the generator's fault, not the
judge's.
"""

import json
from dataclasses import dataclass

import numpy as np

from .connector import TextFeatureSequence
from .dpgscore import PromptGraph, Question
from .utils import rng_from

GRID = 4
CELL = 8
IMAGE_SIZE = GRID * CELL

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
COLOR_RGB = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
}
BACKGROUND = (-1.0, -1.0, -1.0)

# box the shape is drawn into, leaving a 1px gap to the next cell
BOX = CELL - 1

# bounding-box fill ratios that separate the three shapes
SQUARE_MIN_FILL = 0.9
TRIANGLE_MAX_FILL = 0.65
MIN_OBJECT_PIXELS = 12


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple  # (row, col)


@dataclass
class ToyScene:
    objects: list
    seed: int = -1

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 4:
            raise ValueError("scenes hold 1 to 4 objects")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("two objects share a cell")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS:
                raise ValueError(f"unknown shape/color {o.shape}/{o.color}")
            r, c = o.cell
            if not (0 <= r < GRID and 0 <= c < GRID):
                raise ValueError(f"cell {o.cell} outside the {GRID}x{GRID} grid")

    def canonical(self):
        """Objects in row-major cell order; the order every grammar uses."""
        return sorted(self.objects, key=lambda o: o.cell[0] * GRID + o.cell[1])


def sample_scene(rng_seed: int, max_objects: int = 4) -> ToyScene:
    if not 1 <= max_objects <= 4:
        raise ValueError("max_objects must be in [1, 4]")
    rng = rng_from(rng_seed, "scene")
    count = int(rng.integers(1, max_objects + 1))
    cells = rng.choice(GRID * GRID, size=count, replace=False)
    objects = [
        SceneObject(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            cell=(int(cell) // GRID, int(cell) % GRID),
        )
        for cell in cells
    ]
    return ToyScene(objects=objects, seed=rng_seed)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _shape_mask(shape: str) -> np.ndarray:
    """Boolean BOX x BOX stencil; fill ratios drive the oracle's classifier."""
    m = np.zeros((BOX, BOX), dtype=bool)
    if shape == "square":
        m[:] = True
    elif shape == "circle":
        c = (BOX - 1) / 2.0
        yy, xx = np.mgrid[0:BOX, 0:BOX]
        m = (yy - c) ** 2 + (xx - c) ** 2 <= (BOX / 2.0) ** 2
    elif shape == "triangle":
        c = (BOX - 1) // 2
        for i in range(BOX):
            half = int(i * (BOX / 2.0) / (BOX - 1) + 1e-9)
            m[i, c - half : c + half + 1] = True
    else:
        raise ValueError(f"unknown shape {shape}")
    return m


_STENCILS = {s: _shape_mask(s) for s in SHAPES}


def render(scene: ToyScene, size: int = IMAGE_SIZE) -> np.ndarray:
    """Rasterize to float32 [3, size, size] in [-1, 1]; black background."""
    if size != IMAGE_SIZE:
        raise ValueError(f"renderer is pinned to {IMAGE_SIZE}x{IMAGE_SIZE}")
    img = np.full((3, size, size), BACKGROUND[0], dtype=np.float32)
    for obj in scene.objects:
        r, c = obj.cell
        mask = _STENCILS[obj.shape]
        rgb = COLOR_RGB[obj.color]
        for ch in range(3):
            region = img[ch, r * CELL : r * CELL + BOX, c * CELL : c * CELL + BOX]
            region[mask] = rgb[ch]
    return img


# ---------------------------------------------------------------------------
# prompt grammar
# ---------------------------------------------------------------------------


def _build_vocab():
    words = list(COLORS) + list(SHAPES)
    words += [f"cell_{r}_{c}" for r in range(GRID) for c in range(GRID)]
    words += ["left_of", "above", ";", "."]
    return words


VOCAB = _build_vocab()
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
SEP = WORD_TO_ID[";"]
END = WORD_TO_ID["."]


@dataclass
class TokenSequence:
    ids: list

    def words(self):
        return [VOCAB[i] for i in self.ids]

    def __len__(self):
        return len(self.ids)


def adjacent_pairs(scene: ToyScene):
    """Canonically ordered object pairs one grid step apart (right or down)."""
    objs = scene.canonical()
    pairs = []
    for i, a in enumerate(objs):
        for b in objs[i + 1 :]:
            dr, dc = b.cell[0] - a.cell[0], b.cell[1] - a.cell[1]
            if (dr, dc) == (0, 1):
                pairs.append((a, b, "left_of"))
            elif (dr, dc) == (1, 0):
                pairs.append((a, b, "above"))
    return pairs


def scene_to_prompt(scene: ToyScene):
    """Returns (TokenSequence, readable string); canonical row-major order."""
    clauses = []
    for o in scene.canonical():
        clauses.append([o.color, o.shape, f"cell_{o.cell[0]}_{o.cell[1]}"])
    for a, b, rel in adjacent_pairs(scene):
        clauses.append([a.color, a.shape, rel, b.color, b.shape])
    words = []
    for i, clause in enumerate(clauses):
        if i:
            words.append(";")
        words.extend(clause)
    words.append(".")
    ids = [WORD_TO_ID[w] for w in words]
    return TokenSequence(ids=ids), " ".join(words)


def prompt_to_scene(tokens: TokenSequence) -> ToyScene:
    """Inverse of scene_to_prompt; relation clauses are redundant and skipped."""
    words = tokens.words()
    if not words or words[-1] != ".":
        raise ValueError("prompt must end with the terminator token")
    clauses, cur = [], []
    for w in words[:-1]:
        if w == ";":
            clauses.append(cur)
            cur = []
        else:
            cur.append(w)
    clauses.append(cur)
    objects = []
    for clause in clauses:
        if len(clause) == 3:
            color, shape, cellname = clause
            _, r, c = cellname.split("_")
            objects.append(SceneObject(shape=shape, color=color, cell=(int(r), int(c))))
        elif len(clause) != 5:
            raise ValueError(f"malformed clause {clause}")
    return ToyScene(objects=objects)


# ---------------------------------------------------------------------------
# frozen encoders
# ---------------------------------------------------------------------------

ENCODER_SEED = 7001


class PseudoLLM:
    """Frozen random contextual encoder standing in for an LLM's last layer.

    Token embeddings plus sinusoidal positions pass through two random
    self-attention mixing layers; nothing here is ever trained, and all
    weights are pure functions of the seed.
    """

    def __init__(self, d_llm: int = 128, seed: int = ENCODER_SEED, heads: int = 4):
        if d_llm % heads:
            raise ValueError("d_llm must divide by head count")
        self.d_llm = d_llm
        self.heads = heads
        self.seed = seed
        rng = rng_from(seed, "pseudo_llm")
        v = len(VOCAB)
        s = 1.0 / np.sqrt(d_llm)
        self.embed = rng.normal(0.0, 1.0, (v, d_llm)).astype(np.float32)
        self.w = []
        for _ in range(2):
            self.w.append({
                "q": rng.normal(0.0, s, (d_llm, d_llm)).astype(np.float32),
                "k": rng.normal(0.0, s, (d_llm, d_llm)).astype(np.float32),
                "v": rng.normal(0.0, s, (d_llm, d_llm)).astype(np.float32),
                "o": rng.normal(0.0, s, (d_llm, d_llm)).astype(np.float32),
            })
        pos = np.arange(512)
        half = d_llm // 2
        freqs = 10000.0 ** (-np.arange(half) / max(half - 1, 1))
        ang = np.outer(pos, freqs)
        self.positions = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)

    def weight_arrays(self) -> dict:
        out = {"embed": self.embed, "positions": self.positions}
        for i, layer in enumerate(self.w):
            for k, arr in layer.items():
                out[f"layer{i}.{k}"] = arr
        return out

    def encode(self, tokens: TokenSequence) -> TextFeatureSequence:
        ids = np.asarray(tokens.ids)
        if (ids < 0).any() or (ids >= len(VOCAB)).any():
            raise ValueError("unknown token id")
        h = self.embed[ids] + self.positions[: len(ids)]
        dh = self.d_llm // self.heads
        for layer in self.w:
            q = (h @ layer["q"]).reshape(len(ids), self.heads, dh).transpose(1, 0, 2)
            k = (h @ layer["k"]).reshape(len(ids), self.heads, dh).transpose(1, 0, 2)
            v = (h @ layer["v"]).reshape(len(ids), self.heads, dh).transpose(1, 0, 2)
            logits = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
            logits -= logits.max(axis=-1, keepdims=True)
            w = np.exp(logits)
            w /= w.sum(axis=-1, keepdims=True)
            mixed = (w @ v).transpose(1, 0, 2).reshape(len(ids), self.d_llm)
            h = h + mixed @ layer["o"]
            mu = h.mean(axis=-1, keepdims=True)
            sd = np.sqrt(((h - mu) ** 2).mean(axis=-1, keepdims=True) + 1e-5)
            h = (h - mu) / sd
        labels = tokens.words()
        return TextFeatureSequence(features=h.astype(np.float32), token_labels=labels)


BASELINE_TOKENS = 9
BASELINE_CONTEXT = 8


def baseline_encode(tokens: TokenSequence, llm: PseudoLLM) -> TextFeatureSequence:
    """Pooled short-context stand-in: mean feature plus the first 8 tokens."""
    full = llm.encode(tokens).features
    out = np.zeros((BASELINE_TOKENS, llm.d_llm), dtype=np.float32)
    out[0] = full.mean(axis=0)
    n = min(len(full), BASELINE_CONTEXT)
    out[1 : 1 + n] = full[:n]
    return TextFeatureSequence(features=out)


# ---------------------------------------------------------------------------
# answer oracle
# ---------------------------------------------------------------------------

_PROTOTYPES = np.array([BACKGROUND] + [COLOR_RGB[c] for c in COLORS], dtype=np.float32)
_PROTO_NAMES = (None,) + COLORS


def detect_objects(image: np.ndarray):
    """Per-cell color segmentation and fill-ratio shape classification.

    Returns {(row, col): (color, shape)} for cells holding a detected blob.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"oracle expects [3, {IMAGE_SIZE}, {IMAGE_SIZE}] images")
    px = image.transpose(1, 2, 0).reshape(-1, 3)
    dists = ((px[:, None, :] - _PROTOTYPES[None]) ** 2).sum(-1)
    classes = dists.argmin(axis=1).reshape(IMAGE_SIZE, IMAGE_SIZE)
    found = {}
    for r in range(GRID):
        for c in range(GRID):
            region = classes[r * CELL : (r + 1) * CELL, c * CELL : (c + 1) * CELL]
            counts = np.bincount(region.reshape(-1), minlength=len(_PROTOTYPES))
            color_idx = int(counts[1:].argmax()) + 1
            if counts[color_idx] < MIN_OBJECT_PIXELS:
                continue
            mask = region == color_idx
            rows = np.where(mask.any(axis=1))[0]
            cols = np.where(mask.any(axis=0))[0]
            bbox_area = (rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1)
            fill = mask.sum() / bbox_area
            if fill >= SQUARE_MIN_FILL:
                shape = "square"
            elif fill > TRIANGLE_MAX_FILL:
                shape = "circle"
            else:
                shape = "triangle"
            found[(r, c)] = (_PROTO_NAMES[color_idx], shape)
    return found


def oracle_answer(image: np.ndarray, question: dict) -> bool:
    """Programmatic adjudicator over the supported predicate set."""
    detected = detect_objects(image)
    kind = question.get("kind")
    if kind == "exists":
        return any(v == (question["color"], question["shape"]) for v in detected.values())
    if kind == "attribute":
        obj = detected.get(tuple(question["cell"]))
        return obj is not None and obj[0] == question["color"]
    if kind == "relation":
        a_color, a_shape = question["a"]
        b_color, b_shape = question["b"]
        rel = question["rel"]
        a_cells = [cell for cell, v in detected.items() if v == (a_color, a_shape)]
        b_cells = [cell for cell, v in detected.items() if v == (b_color, b_shape)]
        for ca in a_cells:
            for cb in b_cells:
                if ca == cb:
                    continue
                if rel == "left_of" and ca[1] < cb[1]:
                    return True
                if rel == "above" and ca[0] < cb[0]:
                    return True
        return False
    if kind == "count":
        shape = question.get("shape")
        n = sum(1 for v in detected.values() if shape is None or v[1] == shape)
        return n == question["n"]
    raise ValueError(f"unsupported predicate {kind!r}")


# ---------------------------------------------------------------------------
# question-graph generation
# ---------------------------------------------------------------------------


def scene_to_graph(scene: ToyScene, prompt_id: str = None) -> PromptGraph:
    """Entity, attribute, relation, and count questions with dependencies.

    Attribute questions hang off their object's existence question; relation
    questions hang off both; the global count stands alone, so edges only
    ever point at existence questions and the graph is a DAG by construction.
    """
    if prompt_id is None:
        prompt_id = f"scene-{scene.seed}"
    objs = scene.canonical()
    questions = []
    ent_ids = {}
    for i, o in enumerate(objs):
        qid = f"e{i}"
        ent_ids[o.cell] = qid
        questions.append(Question(
            id=qid,
            text=f"is there a {o.color} {o.shape}",
            level1="Entity", level2="presence",
            depends_on=[],
            predicate={"kind": "exists", "color": o.color, "shape": o.shape},
        ))
    for i, o in enumerate(objs):
        questions.append(Question(
            id=f"a{i}",
            text=f"is the object at cell_{o.cell[0]}_{o.cell[1]} {o.color}",
            level1="Attribute", level2="color",
            depends_on=[f"e{i}"],
            predicate={"kind": "attribute", "cell": list(o.cell), "color": o.color},
        ))
    for k, (a, b, rel) in enumerate(adjacent_pairs(scene)):
        nice = rel.replace("_", " ")
        questions.append(Question(
            id=f"r{k}",
            text=f"is the {a.color} {a.shape} {nice} the {b.color} {b.shape}",
            level1="Relation", level2="spatial",
            depends_on=[ent_ids[a.cell], ent_ids[b.cell]],
            predicate={"kind": "relation", "a": [a.color, a.shape],
                       "b": [b.color, b.shape], "rel": rel},
        ))
    questions.append(Question(
        id="g0",
        text=f"are there exactly {len(objs)} objects",
        level1="Global", level2="count",
        depends_on=[],
        predicate={"kind": "count", "n": len(objs)},
    ))
    return PromptGraph(prompt_id=prompt_id, questions=questions)


def answer_graph(image: np.ndarray, graph: PromptGraph) -> dict:
    return {q.id: oracle_answer(image, q.predicate) for q in graph.questions}


# ---------------------------------------------------------------------------
# fixtures on disk
# ---------------------------------------------------------------------------


def make_dataset(n_scenes: int, seed_base: int, max_objects: int = 4):
    """Scenes plus (render, prompt tokens) training pairs, seeded seed_base+i."""
    scenes = [sample_scene(seed_base + i, max_objects) for i in range(n_scenes)]
    pairs = [(render(sc), scene_to_prompt(sc)[0]) for sc in scenes]
    return scenes, pairs


def save_scenes(path, scenes) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            rec = {
                "seed": s.seed,
                "objects": [
                    {"shape": o.shape, "color": o.color, "cell": list(o.cell)}
                    for o in s.objects
                ],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_scenes(path):
    scenes = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            scenes.append(ToyScene(
                objects=[SceneObject(o["shape"], o["color"], tuple(o["cell"]))
                         for o in rec["objects"]],
                seed=rec.get("seed", -1),
            ))
    return scenes


def write_raw_tensor(path, arr: np.ndarray) -> None:
    """Shape header (u32 ndim, u32 dims) then little-endian float32 data."""
    import struct

    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_raw_tensor(path) -> np.ndarray:
    import struct

    with open(path, "rb") as fh:
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = fh.read()
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy()
