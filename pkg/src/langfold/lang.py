"""Instruction grammar, tokenizer, and train/test splits.

Instructions are generated from a closed template grammar (grammar.txt).
Each folding task type has 16 templates: 12 "seen" templates used for
training data and 4 "unseen" templates held out to probe paraphrase
generalization. One fold direction per task type is additionally held out
entirely (never in training data) to probe task-level generalization.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_TOKENS = 12
PAD_ID = 0
UNK_ID = 1
MAX_VOCAB = 64

TEMPLATES_PER_TASK = 16
SEEN_TEMPLATES_PER_TASK = 12


class GrammarError(ValueError):
    pass


class TaskType(enum.Enum):
    CORNER = 0
    TRIANGLE = 1
    HALF = 2


class Direction(enum.Enum):
    """Fold direction. The first four name a corner to move, the last four
    name which half folds over which."""

    BOTTOM_LEFT = 0
    BOTTOM_RIGHT = 1
    TOP_LEFT = 2
    TOP_RIGHT = 3
    LEFT_OVER_RIGHT = 4
    RIGHT_OVER_LEFT = 5
    TOP_OVER_BOTTOM = 6
    BOTTOM_OVER_TOP = 7


CORNER_DIRECTIONS = (
    Direction.BOTTOM_LEFT,
    Direction.BOTTOM_RIGHT,
    Direction.TOP_LEFT,
    Direction.TOP_RIGHT,
)
HALF_DIRECTIONS = (
    Direction.LEFT_OVER_RIGHT,
    Direction.RIGHT_OVER_LEFT,
    Direction.TOP_OVER_BOTTOM,
    Direction.BOTTOM_OVER_TOP,
)

# Direction held out of the training data for each task type.
HELD_OUT_DIRECTION = {
    TaskType.CORNER: Direction.BOTTOM_RIGHT,
    TaskType.TRIANGLE: Direction.BOTTOM_RIGHT,
    TaskType.HALF: Direction.BOTTOM_OVER_TOP,
}

_CORNER_PHRASE = {
    Direction.BOTTOM_LEFT: "bottom left",
    Direction.BOTTOM_RIGHT: "bottom right",
    Direction.TOP_LEFT: "top left",
    Direction.TOP_RIGHT: "top right",
}
_HALF_PHRASE = {
    Direction.LEFT_OVER_RIGHT: ("left", "right"),
    Direction.RIGHT_OVER_LEFT: ("right", "left"),
    Direction.TOP_OVER_BOTTOM: ("top", "bottom"),
    Direction.BOTTOM_OVER_TOP: ("bottom", "top"),
}


class Split(enum.Enum):
    SEEN = "seen"
    UNSEEN_INSTRUCTION = "unseen_instruction"
    UNSEEN_TASK = "unseen_task"


@dataclass(frozen=True)
class TaskSpec:
    task_type: TaskType
    direction: Direction

    def __post_init__(self):
        family = HALF_DIRECTIONS if self.task_type is TaskType.HALF else CORNER_DIRECTIONS
        if self.direction not in family:
            raise GrammarError(
                f"direction {self.direction.name} not valid for task {self.task_type.name}"
            )

    @property
    def direction_code(self) -> int:
        # per-family code written to disk (0..3 within each family)
        return self.direction.value % 4

    @staticmethod
    def from_codes(task_code: int, direction_code: int) -> "TaskSpec":
        task = TaskType(task_code)
        if task is TaskType.HALF:
            return TaskSpec(task, Direction(direction_code + 4))
        return TaskSpec(task, Direction(direction_code))


def directions_for(task_type: TaskType):
    return HALF_DIRECTIONS if task_type is TaskType.HALF else CORNER_DIRECTIONS


def training_directions(task_type: TaskType):
    held = HELD_OUT_DIRECTION[task_type]
    return tuple(d for d in directions_for(task_type) if d is not held)


_TASK_NAMES = {"corner": TaskType.CORNER, "triangle": TaskType.TRIANGLE, "half": TaskType.HALF}


def _load_templates(path: Path) -> dict[TaskType, list[tuple[str, bool]]]:
    """Parse grammar.txt into {task: [(template, is_seen), ...]} preserving order."""
    templates: dict[TaskType, list[tuple[str, bool]]] = {t: [] for t in TaskType}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 3:
            raise GrammarError(f"{path.name}:{lineno}: expected 'task | tier | template'")
        task_name, tier, template = parts
        if task_name not in _TASK_NAMES:
            raise GrammarError(f"{path.name}:{lineno}: unknown task {task_name!r}")
        if tier not in ("seen", "unseen"):
            raise GrammarError(f"{path.name}:{lineno}: unknown tier {tier!r}")
        templates[_TASK_NAMES[task_name]].append((template, tier == "seen"))
    for task, rows in templates.items():
        if len(rows) != TEMPLATES_PER_TASK:
            raise GrammarError(f"task {task.name}: expected {TEMPLATES_PER_TASK} templates")
        if sum(seen for _, seen in rows) != SEEN_TEMPLATES_PER_TASK:
            raise GrammarError(f"task {task.name}: expected {SEEN_TEMPLATES_PER_TASK} seen")
    return templates


def render_instruction(task: TaskSpec, template_id: int) -> str:
    rows = _TEMPLATES[task.task_type]
    if not 0 <= template_id < len(rows):
        raise GrammarError(f"template id {template_id} out of range")
    template = rows[template_id][0]
    if task.task_type is TaskType.HALF:
        src, dst = _HALF_PHRASE[task.direction]
        return template.format(src=src, dst=dst)
    return template.format(dir=_CORNER_PHRASE[task.direction])


def template_is_seen(task_type: TaskType, template_id: int) -> bool:
    return _TEMPLATES[task_type][template_id][1]


def seen_template_ids(task_type: TaskType) -> list[int]:
    return [i for i, (_, seen) in enumerate(_TEMPLATES[task_type]) if seen]


def _build_vocabulary() -> dict[str, int]:
    words = set()
    for task_type in TaskType:
        for d in directions_for(task_type):
            for t in range(TEMPLATES_PER_TASK):
                words.update(render_instruction(TaskSpec(task_type, d), t).split())
    vocab = {"<pad>": PAD_ID, "<unk>": UNK_ID}
    for w in sorted(words):
        vocab[w] = len(vocab)
    if len(vocab) > MAX_VOCAB:
        raise GrammarError(f"vocabulary size {len(vocab)} exceeds {MAX_VOCAB}")
    return vocab


def tokenize(text: str) -> np.ndarray:
    """Map a sentence to a fixed-length id sequence, PAD-filled on the right."""
    words = text.strip().lower().split()
    if len(words) > MAX_TOKENS:
        raise GrammarError(f"sentence has {len(words)} words, max is {MAX_TOKENS}")
    ids = np.full(MAX_TOKENS, PAD_ID, dtype=np.int64)
    for i, w in enumerate(words):
        ids[i] = VOCAB.get(w, UNK_ID)
    return ids


def detokenize(tokens) -> str:
    words = []
    for tid in np.asarray(tokens).ravel():
        if tid == PAD_ID:
            break
        words.append(_INVERSE_VOCAB.get(int(tid), "<unk>"))
    return " ".join(words)


@dataclass(frozen=True)
class Instruction:
    text: str
    task: TaskSpec
    template_id: int
    split: Split

    @property
    def tokens(self) -> np.ndarray:
        return tokenize(self.text)


def _split_of(task_type: TaskType, direction: Direction, template_id: int) -> Split:
    if direction is HELD_OUT_DIRECTION[task_type]:
        return Split.UNSEEN_TASK
    if template_is_seen(task_type, template_id):
        return Split.SEEN
    return Split.UNSEEN_INSTRUCTION


def build_splits(seed: int = 0) -> dict[Split, list[Instruction]]:
    """Enumerate every instruction in the grammar, grouped by evaluation split.

    The grouping is a fixed property of the grammar (`seed` is accepted for
    interface symmetry but does not affect membership). Per task type:
    3 training directions x 12 seen templates land in SEEN, x 4 unseen
    templates in UNSEEN_INSTRUCTION, and the held-out direction x all 16
    templates in UNSEEN_TASK.
    """
    splits: dict[Split, list[Instruction]] = {s: [] for s in Split}
    for task_type in TaskType:
        for direction in directions_for(task_type):
            for template_id in range(TEMPLATES_PER_TASK):
                task = TaskSpec(task_type, direction)
                split = _split_of(task_type, direction, template_id)
                splits[split].append(
                    Instruction(render_instruction(task, template_id), task, template_id, split)
                )
    return splits


def instruction_from_text(text: str) -> Instruction:
    """Recover the instruction record for a grammar sentence (exact match)."""
    key = " ".join(text.strip().lower().split())
    try:
        return _SENTENCE_INDEX[key]
    except KeyError:
        raise GrammarError(f"sentence not generated by the grammar: {text!r}") from None


def _build_sentence_index() -> dict[str, Instruction]:
    index: dict[str, Instruction] = {}
    for instrs in build_splits().values():
        for ins in instrs:
            if ins.text in index:
                raise GrammarError(f"duplicate sentence in grammar: {ins.text!r}")
            index[ins.text] = ins
    return index


_TEMPLATES = _load_templates(Path(__file__).with_name("grammar.txt"))
VOCAB = _build_vocabulary()
_INVERSE_VOCAB = {i: w for w, i in VOCAB.items()}
VOCAB_SIZE = len(VOCAB)
_SENTENCE_INDEX = _build_sentence_index()
