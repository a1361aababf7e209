"""Seeded tabletop gridworld: pick the named object, drop it in the named receptacle.

Coordinates are continuous ``(x, y)`` in ``[0, N]``; entity ``(col, row)``
cells have their centre at ``(col + 0.5, row + 0.5)``.  Observations are
``N x N x C`` multi-hot grids indexed ``[row, col]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("square", "circle", "triangle", "star")
RECEPTACLES = ("bin", "box")
# colour-shape pairs that never appear in action scenes; captions still show them
HELD_OUT = frozenset({("red", "star"), ("green", "triangle"), ("blue", "circle"), ("yellow", "square")})

WORDS = (
    "<pad>", "<act>", "put", "in", "where", "is", "?", "row", "col", "pick", "place", "|",
    *[str(i) for i in range(10)], *COLORS, *SHAPES, *RECEPTACLES,
)
WORD_ID = {w: i for i, w in enumerate(WORDS)}
TEXT_VOCAB = 64

CHANNELS = (*COLORS, *SHAPES, *RECEPTACLES, "gripper")
N_CHANNELS = len(CHANNELS)

GRID = 8
MOVE = 0.5
REACH = 0.5
BUDGET = 200
HORIZON = 8
ACTION_DIM = 3
STATE_DIM = 3
DIFFICULTIES = ("easy", "ambiguous", "ood")


def tokens(words: Sequence[str]) -> list[int]:
    return [WORD_ID[w] for w in words]


def words_of(ids: Sequence[int]) -> list[str]:
    return [WORDS[i] for i in ids]


@dataclass(frozen=True)
class Obj:
    color: str
    shape: str
    cell: tuple[int, int]


@dataclass(frozen=True)
class Instruction:
    verb: str
    color: str
    shape: str
    receptacle: str

    @property
    def words(self) -> list[str]:
        return [self.verb, self.color, self.shape, "in", self.receptacle]

    @property
    def token_ids(self) -> list[int]:
        return tokens(self.words)

    @classmethod
    def from_tokens(cls, ids: Sequence[int]) -> "Instruction":
        w = words_of(ids)
        if len(w) != 5 or w[3] != "in":
            raise ValueError(f"not an instruction: {w}")
        return cls(w[0], w[1], w[2], w[4])

    def to_dict(self) -> dict:
        return {"verb": self.verb, "color": self.color, "shape": self.shape, "receptacle": self.receptacle}


@dataclass(frozen=True)
class Scene:
    objects: tuple[Obj, ...]
    receptacles: tuple[tuple[str, tuple[int, int]], ...]
    gripper: tuple[float, float]
    target: int
    seed: int
    size: int = GRID

    def receptacle_pos(self, name: str) -> np.ndarray:
        for n, cell in self.receptacles:
            if n == name:
                return _center(cell)
        raise KeyError(name)

    def matching(self, color: str, shape: str) -> list[int]:
        return [i for i, o in enumerate(self.objects) if o.color == color and o.shape == shape]

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "target": self.target,
            "gripper": list(self.gripper),
            "objects": [{"color": o.color, "shape": o.shape, "cell": list(o.cell)} for o in self.objects],
            "receptacles": [{"name": n, "cell": list(c)} for n, c in self.receptacles],
        }

    @classmethod
    def from_dict(cls, d: dict, seed: int = 0) -> "Scene":
        return cls(
            tuple(Obj(o["color"], o["shape"], tuple(o["cell"])) for o in d["objects"]),
            tuple((r["name"], tuple(r["cell"])) for r in d["receptacles"]),
            tuple(d["gripper"]),
            d["target"],
            seed,
            d["size"],
        )


@dataclass(frozen=True)
class EnvState:
    gripper: tuple[float, float]
    holding: int | None = None
    t: int = 0
    delivered: tuple[tuple[int, str], ...] = ()
    reached: bool = False
    grasped: bool = False
    success: bool = False
    first_grasp: int | None = None

    def q(self, size: int = GRID) -> np.ndarray:
        """Proprioceptive state ``(x, y, holding)`` scaled to [-1, 1]."""
        x, y = self.gripper
        return np.array([2 * x / size - 1, 2 * y / size - 1, 1.0 if self.holding is not None else -1.0])


@dataclass
class EvalResult:
    seed: int
    score: float
    followed: bool | None
    first_grasp: int | None
    steps: int
    n_objects: int
    difficulty: str


def _center(cell) -> np.ndarray:
    return np.asarray(cell, dtype=np.float64) + 0.5


# ---------------------------------------------------------------- reset/step


def _combos(allow_held_out: bool) -> list[tuple[str, str]]:
    return [(c, s) for c in COLORS for s in SHAPES if allow_held_out or (c, s) not in HELD_OUT]


def reset(seed: int, difficulty: str = "easy", n_objects: int | None = None) -> tuple[Scene, EnvState, Instruction]:
    """Deterministic scene for ``seed``.

    ``ambiguous`` makes every distractor share colour or shape with the
    target; ``ood`` does the same with a held-out target combination.
    """
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 7)) if n_objects is None else n_objects
    if not 2 <= k <= 6:
        raise ValueError(f"object count must be in [2, 6], got {k}")
    if difficulty == "ood":
        pool = sorted(HELD_OUT)
        target = pool[int(rng.integers(len(pool)))]
    else:
        pool = _combos(False)
        target = pool[int(rng.integers(len(pool)))]
    allowed = _combos(False)
    if difficulty == "easy":
        others = [c for c in allowed if c != target]
    else:
        others = [c for c in allowed if c != target and (c[0] == target[0] or c[1] == target[1])]
    picks = rng.choice(len(others), size=k - 1, replace=len(others) < k - 1)
    combos = [target] + [others[i] for i in picks]
    cells = rng.choice(GRID * GRID, size=k + len(RECEPTACLES) + 1, replace=False)
    cells = [(int(c % GRID), int(c // GRID)) for c in cells]
    order = rng.permutation(k)
    objects = tuple(Obj(combos[j][0], combos[j][1], cells[i]) for i, j in enumerate(order))
    t_idx = int(np.flatnonzero(order == 0)[0])
    recs = tuple((name, cells[k + i]) for i, name in enumerate(RECEPTACLES))
    grip = tuple(float(v) for v in _center(cells[-1]))
    receptacle = RECEPTACLES[int(rng.integers(len(RECEPTACLES)))]
    scene = Scene(objects, recs, grip, t_idx, seed)
    instr = Instruction("put", target[0], target[1], receptacle)
    return scene, EnvState(grip), instr


def object_pos(scene: Scene, state: EnvState, i: int) -> np.ndarray:
    if state.holding == i:
        return np.asarray(state.gripper)
    return _center(scene.objects[i].cell)


def _present(state: EnvState, n: int) -> list[int]:
    gone = {i for i, _ in state.delivered}
    return [i for i in range(n) if i not in gone]


def step(scene: Scene, state: EnvState, instr: Instruction, action) -> tuple[EnvState, bool]:
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    pos = np.clip(np.asarray(state.gripper) + MOVE * a[:2], 0.0, scene.size)
    holding, delivered = state.holding, state.delivered
    grasped, success, first = state.grasped, state.success, state.first_grasp
    if holding is None and a[2] > 0.5:
        near = [(np.linalg.norm(_center(scene.objects[i].cell) - pos), i) for i in _present(state, len(scene.objects))]
        near = [x for x in near if x[0] < REACH]
        if near:
            holding = min(near)[1]
            first = holding if first is None else first
            grasped = grasped or holding == scene.target
    elif holding is not None and a[2] < -0.5:
        for name, cell in scene.receptacles:
            if np.linalg.norm(_center(cell) - pos) < REACH:
                delivered = delivered + ((holding, name),)
                if holding == scene.target and name == instr.receptacle:
                    success = True
                holding = None
                break
    new = replace(
        state, gripper=(float(pos[0]), float(pos[1])), holding=holding, t=state.t + 1,
        delivered=delivered, grasped=grasped, success=success, first_grasp=first,
    )
    if not new.reached and scene.target in _present(new, len(scene.objects)):
        if np.linalg.norm(object_pos(scene, new, scene.target) - pos) < REACH:
            new = replace(new, reached=True)
    done = success or new.t >= BUDGET
    return new, done


def score(state: EnvState) -> float:
    return (state.reached + state.grasped + state.success) / 3.0


# ----------------------------------------------------------------- observation


def observe(scene: Scene, state: EnvState) -> np.ndarray:
    grid = np.zeros((scene.size, scene.size, N_CHANNELS), dtype=np.float64)
    for i in _present(state, len(scene.objects)):
        o = scene.objects[i]
        if state.holding == i:
            col, row = _cell_of(state.gripper, scene.size)
        else:
            col, row = o.cell
        grid[row, col, COLORS.index(o.color)] = 1
        grid[row, col, len(COLORS) + SHAPES.index(o.shape)] = 1
    for name, (col, row) in scene.receptacles:
        grid[row, col, len(COLORS) + len(SHAPES) + RECEPTACLES.index(name)] = 1
    col, row = _cell_of(state.gripper, scene.size)
    grid[row, col, -1] = 1
    return grid


def decode_observation(grid: np.ndarray) -> dict:
    """Entity layout recovered from a grid with no shared cells."""
    nc, ns = len(COLORS), len(SHAPES)
    objects, recs, gripper = [], [], None
    for row in range(grid.shape[0]):
        for col in range(grid.shape[1]):
            v = grid[row, col]
            if v[:nc].any():
                objects.append((COLORS[int(np.argmax(v[:nc]))], SHAPES[int(np.argmax(v[nc:nc + ns]))], (col, row)))
            for r, name in enumerate(RECEPTACLES):
                if v[nc + ns + r]:
                    recs.append((name, (col, row)))
            if v[-1]:
                gripper = (col, row)
    return {"objects": objects, "receptacles": recs, "gripper": gripper}


def _cell_of(pos, size) -> tuple[int, int]:
    x, y = pos
    return min(int(x), size - 1), min(int(y), size - 1)


# ------------------------------------------------------------------- expert


def scripted_expert(state: EnvState, scene: Scene, instr: Instruction) -> np.ndarray:
    """Proportional controller: go to target, grip, go to receptacle, release."""
    pos = np.asarray(state.gripper)
    if state.holding is None:
        goal = _center(scene.objects[scene.target].cell)
        grip = 1.0
    else:
        goal = scene.receptacle_pos(instr.receptacle)
        grip = -1.0
    delta = goal - pos
    if np.linalg.norm(delta) < 0.25:
        return np.array([0.0, 0.0, grip])
    v = np.clip(delta / MOVE, -1.0, 1.0)
    return np.array([v[0], v[1], 0.0])


def subtask_words(state: EnvState, scene: Scene, instr: Instruction) -> list[str]:
    if state.holding is None:
        return ["pick", instr.color, instr.shape]
    return ["place", "in", instr.receptacle]


def expert_episode(seed: int, difficulty: str = "easy", horizon: int = HORIZON):
    """Roll out the expert; returns ``(scene, instr, steps, success)``.

    Each step entry holds the state at a chunk boundary and the next
    ``horizon`` expert actions (zero after termination).
    """
    scene, state, instr = reset(seed, difficulty)
    steps = []
    done = False
    while not done:
        start = state
        chunk = np.zeros((horizon, ACTION_DIM))
        for h in range(horizon):
            if done:
                break
            a = scripted_expert(state, scene, instr)
            chunk[h] = a
            state, done = step(scene, state, instr, a)
        steps.append((start, chunk))
    return scene, instr, steps, state.success


# ------------------------------------------------------------------ dataset


def caption_record(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 7))
    combos = _combos(True)
    picks = rng.choice(len(combos), size=k, replace=False)
    cells = rng.choice(GRID * GRID, size=k + len(RECEPTACLES) + 1, replace=False)
    cells = [(int(c % GRID), int(c // GRID)) for c in cells]
    objects = tuple(Obj(combos[j][0], combos[j][1], cells[i]) for i, j in enumerate(picks))
    recs = tuple((name, cells[k + i]) for i, name in enumerate(RECEPTACLES))
    ask = int(rng.integers(k))
    scene = Scene(objects, recs, tuple(float(v) for v in _center(cells[-1])), ask, seed)
    o = objects[ask]
    return {
        "kind": "caption",
        "seed": seed,
        "scene": scene.to_dict(),
        "caption": {
            "question": tokens(["where", "is", o.color, o.shape, "?"]),
            "answer": tokens(["row", str(o.cell[1]), "col", str(o.cell[0])]),
        },
    }


def action_record(seed: int, difficulty: str, annotate: bool) -> dict:
    scene, instr, steps, success = expert_episode(seed, difficulty)
    out = []
    for st, chunk in steps:
        entry = {
            "state": [float(v) for v in st.q(scene.size)],
            "gripper": [float(v) for v in st.gripper],
            "held": st.holding,
            "chunk": [[float(v) for v in row] for row in chunk],
        }
        if annotate:
            entry["subtask"] = tokens(subtask_words(st, scene, instr))
        out.append(entry)
    return {
        "kind": "action",
        "seed": seed,
        "difficulty": difficulty,
        "scene": scene.to_dict(),
        "instruction": {"tokens": instr.token_ids, "form": instr.to_dict()},
        "steps": out,
        "success": bool(success),
    }


def generate_dataset(count: int, seed: int = 0, ambiguous_fraction: float = 0.5,
                     caption_fraction: float = 0.2, subtask_fraction: float = 0.5,
                     split: str = "train") -> list[dict]:
    records = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        rec_seed = int(rng.integers(2**31 - 1))
        if rng.random() < caption_fraction:
            rec = caption_record(rec_seed)
        else:
            diff = "ambiguous" if rng.random() < ambiguous_fraction else "easy"
            rec = action_record(rec_seed, diff, annotate=bool(rng.random() < subtask_fraction))
        rec["split"] = split
        records.append(rec)
    return records


def write_jsonl(records: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def record_observation(rec: dict, entry: dict | None = None) -> np.ndarray:
    """Observation grid for a caption record or one step of an action record."""
    scene = Scene.from_dict(rec["scene"], rec["seed"])
    if entry is None:
        return observe(scene, EnvState(scene.gripper))
    return observe(scene, EnvState(tuple(entry["gripper"]), holding=entry["held"]))


# --------------------------------------------------------------------- rollout


@dataclass
class Observation:
    grid: np.ndarray
    instruction: list[int]
    q: np.ndarray


ChunkPolicy = Callable[[Sequence[Observation]], np.ndarray]


def evaluate_rollout(policy: ChunkPolicy, seeds: Sequence[int], difficulty: str = "ambiguous",
                     horizon: int = HORIZON, budget: int = BUDGET) -> list[EvalResult]:
    """Closed-loop rollouts, all seeds stepped in lockstep.

    ``policy`` maps a batch of observations to raw action chunks
    ``(B, horizon, 3)``; a fresh chunk is requested every ``horizon`` steps.
    """
    envs = [reset(s, difficulty) for s in seeds]
    states = [e[1] for e in envs]
    done = [False] * len(seeds)
    while not all(done):
        live = [i for i, d in enumerate(done) if not d]
        obs = [
            Observation(observe(envs[i][0], states[i]), envs[i][2].token_ids, states[i].q(envs[i][0].size))
            for i in live
        ]
        chunks = np.asarray(policy(obs))
        for j, i in enumerate(live):
            scene, _, instr = envs[i]
            for h in range(horizon):
                states[i], d = step(scene, states[i], instr, chunks[j, h])
                if d or states[i].t >= budget:
                    done[i] = True
                    break
    out = []
    for (scene, _, _), st, seed in zip(envs, states, seeds):
        k = len(scene.objects)
        followed = None
        if k >= 2 and st.first_grasp is not None:
            followed = st.first_grasp == scene.target
        out.append(EvalResult(seed, score(st), followed, st.first_grasp, st.t, k, difficulty))
    return out


def follow_rate(results: Sequence[EvalResult]) -> float:
    """Share of episodes with a grasp whose first grasp was the instructed object (0 if none)."""
    defined = [r.followed for r in results if r.followed is not None]
    return float(np.mean(defined)) if defined else 0.0


def chance_rate(results: Sequence[EvalResult]) -> float:
    defined = [1.0 / r.n_objects for r in results if r.followed is not None]
    return float(np.mean(defined)) if defined else 0.0


def random_policy(seed: int) -> ChunkPolicy:
    rng = np.random.default_rng(seed)

    def act(obs):
        return rng.uniform(-1, 1, size=(len(obs), HORIZON, ACTION_DIM))

    return act


def expert_policy() -> ChunkPolicy:
    """Expert chunks planned from the observation alone (oracle upper bound).

    The scene is rebuilt from the grid and the expert is simulated for one
    chunk; the dynamics are deterministic, so this matches closed-loop expert
    behaviour.
    """

    def act(obs):
        out = np.zeros((len(obs), HORIZON, ACTION_DIM))
        for j, o in enumerate(obs):
            scene, state, instr = scene_from_observation(o)
            for h in range(HORIZON):
                a = scripted_expert(state, scene, instr)
                out[j, h] = a
                state, done = step(scene, state, instr, a)
                if done:
                    break
        return out

    return act


def scene_from_observation(o: Observation) -> tuple[Scene, EnvState, Instruction]:
    layout = decode_observation(o.grid)
    instr = Instruction.from_tokens(o.instruction)
    size = o.grid.shape[0]
    objects = tuple(Obj(c, s, cell) for c, s, cell in layout["objects"])
    match = [i for i, ob in enumerate(objects) if (ob.color, ob.shape) == (instr.color, instr.shape)]
    target = match[0] if match else 0
    x, y, h = o.q
    grip = ((x + 1) * size / 2, (y + 1) * size / 2)
    holding = target if h > 0 else None
    scene = Scene(objects, tuple(layout["receptacles"]), grip, target, 0, size)
    return scene, EnvState(grip, holding=holding), instr
