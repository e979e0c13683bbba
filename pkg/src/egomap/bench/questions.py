"""Spatial QA generation with ground truth derived from the scene spec."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from ..errors import InsufficientObjects

QUESTION_KINDS = (
    "relative_direction",
    "relative_distance",
    "absolute_distance",
    "object_size",
    "object_count",
    "appearance_order",
)

# Categorical kinds carry lettered choices; the rest have numeric truth.
CHOICE_KINDS = {"relative_direction", "relative_distance", "appearance_order"}

_LETTERS = "ABCDEF"

# Geometric margins keeping questions unambiguous under map noise.
_MIN_PAIR_DIST = 0.5
_DIRECTION_MARGIN = 0.35
_DISTANCE_MARGIN = 0.35
_APPEARANCE_GAP = 5


@dataclass(frozen=True)
class QAItem:
    kind: str
    question: str
    choices: tuple[str, ...] | None
    answer: str | None          # choice letter for categorical kinds
    answer_value: float | None  # numeric truth for metric kinds
    derivation: str
    labels: tuple[str, ...]


def _format_choices(options) -> str:
    return " ".join(f"({_LETTERS[i]}) {opt}" for i, opt in enumerate(options))


def left_of(face_from: np.ndarray, face_to: np.ndarray, query: np.ndarray,
            up=(0.0, 1.0, 0.0)) -> float:
    """Signed 'leftness' of ``query`` for a viewer at ``face_from`` facing ``face_to``.

    Positive means left. Uses the horizontal components orthogonal to
    ``up``; the sign is invariant under any proper rigid motion applied
    consistently with ``up``.
    """
    f = np.asarray(face_to, dtype=float) - np.asarray(face_from, dtype=float)
    d = np.asarray(query, dtype=float) - np.asarray(face_from, dtype=float)
    left_dir = np.cross(np.asarray(up, dtype=float), f)
    nf, nd = np.linalg.norm(left_dir), np.linalg.norm(d)
    if nf < 1e-12 or nd < 1e-12:
        return 0.0
    return float(np.dot(left_dir, d) / (nf * nd))


_MIN_VISIBLE_FRAMES = 6
_MIN_VISIBLE_FRACTION = 0.25


class _Samplers:
    def __init__(self, bundle, rng: np.random.Generator):
        self.bundle = bundle
        self.scene = bundle.scene
        self.rng = rng
        uniq = set(self.scene.unique_labels())
        vf = bundle.truth.visible_fractions
        # Relational questions only reference objects the video actually
        # shows well; otherwise no selection policy could answer them.
        self.unique = [
            (i, o) for i, o in enumerate(self.scene.objects)
            if o.label in uniq
            and (vf[:, i] > _MIN_VISIBLE_FRACTION).sum() >= _MIN_VISIBLE_FRAMES
        ]

    def _pick_unique(self, count: int):
        if len(self.unique) < count:
            return None
        idx = self.rng.choice(len(self.unique), size=count, replace=False)
        return [self.unique[int(i)] for i in idx]

    def relative_direction(self) -> QAItem | None:
        picks = self._pick_unique(3)
        if picks is None:
            raise InsufficientObjects("relative_direction needs 3 uniquely-labeled objects")
        (_, c), (_, a), (_, b) = picks
        if (np.linalg.norm(a.center - c.center) < _MIN_PAIR_DIST
                or np.linalg.norm(b.center - c.center) < _MIN_PAIR_DIST):
            return None
        s = left_of(c.center, a.center, b.center)
        if abs(s) < _DIRECTION_MARGIN:
            return None
        answer = "A" if s > 0 else "B"
        q = (f"If you stand at the {c.label} and face the {a.label}, "
             f"is the {b.label} to your left or to your right? "
             f"Choices: {_format_choices(['left', 'right'])}")
        return QAItem(
            kind="relative_direction", question=q, choices=("left", "right"),
            answer=answer, answer_value=None,
            derivation=f"leftness({c.label}->{a.label}, {b.label}) = {s:.3f}",
            labels=(c.label, a.label, b.label),
        )

    def relative_distance(self) -> QAItem | None:
        picks = self._pick_unique(4)
        if picks is None:
            raise InsufficientObjects("relative_distance needs 4 uniquely-labeled objects")
        (_, target), *cands = picks
        dists = [float(np.linalg.norm(o.center - target.center)) for _, o in cands]
        order = np.argsort(dists)
        if dists[order[1]] < dists[order[0]] + max(_DISTANCE_MARGIN, 0.2 * dists[order[0]]):
            return None
        options = [o.label for _, o in cands]
        q = (f"Which of these objects is closest to the {target.label}? "
             f"Choices: {_format_choices(options)}")
        return QAItem(
            kind="relative_distance", question=q, choices=tuple(options),
            answer=_LETTERS[int(order[0])], answer_value=None,
            derivation="distances " + ", ".join(f"{lbl}={d:.3f}" for lbl, d in zip(options, dists)),
            labels=(target.label, *options),
        )

    def absolute_distance(self) -> QAItem | None:
        picks = self._pick_unique(2)
        if picks is None:
            raise InsufficientObjects("absolute_distance needs 2 uniquely-labeled objects")
        (_, a), (_, b) = picks
        d = float(np.linalg.norm(a.center - b.center))
        if d < _MIN_PAIR_DIST:
            return None
        q = f"What is the distance in meters between the {a.label} and the {b.label}?"
        return QAItem(
            kind="absolute_distance", question=q, choices=None, answer=None,
            answer_value=d, derivation=f"|{a.label} - {b.label}| = {d:.4f} m",
            labels=(a.label, b.label),
        )

    def object_size(self) -> QAItem | None:
        picks = self._pick_unique(1)
        if picks is None:
            raise InsufficientObjects("object_size needs a uniquely-labeled object")
        (_, a) = picks[0]
        size = float(a.extents.max())
        q = f"What is the longest dimension of the {a.label} in meters?"
        return QAItem(
            kind="object_size", question=q, choices=None, answer=None,
            answer_value=size, derivation=f"max extents {a.extents.tolist()} = {size:.4f}",
            labels=(a.label,),
        )

    def object_count(self) -> QAItem | None:
        counts = {}
        for o in self.scene.objects:
            counts[o.label] = counts.get(o.label, 0) + 1
        if not counts:
            raise InsufficientObjects("object_count needs at least one object")
        labels = sorted(counts)
        dups = [lbl for lbl in labels if counts[lbl] > 1]
        pool = dups if dups else labels
        lbl = pool[int(self.rng.integers(0, len(pool)))]
        q = f"How many instances of {lbl} are in the scene?"
        return QAItem(
            kind="object_count", question=q, choices=None, answer=None,
            answer_value=float(counts[lbl]), derivation=f"count({lbl}) = {counts[lbl]}",
            labels=(lbl,),
        )

    def appearance_order(self) -> QAItem | None:
        firsts = []
        for i, o in self.unique:
            f = self.bundle.first_appearance(i)
            if f is not None:
                firsts.append((f, o.label))
        if len(firsts) < 3:
            raise InsufficientObjects("appearance_order needs 3 visible unique objects")
        idx = self.rng.choice(len(firsts), size=3, replace=False)
        trio = sorted(firsts[int(i)] for i in idx)
        if trio[1][0] - trio[0][0] < _APPEARANCE_GAP or trio[2][0] - trio[1][0] < _APPEARANCE_GAP:
            return None
        truth = tuple(lbl for _, lbl in trio)
        perms = [truth]
        labels = list(truth)
        while len(perms) < 4:
            p = tuple(self.rng.permutation(labels))
            if p not in perms:
                perms.append(p)
        order = self.rng.permutation(4)
        options = [", ".join(perms[int(i)]) for i in order]
        answer = _LETTERS[int(np.nonzero(order == 0)[0][0])]
        q = ("In what order do these objects first appear in the video? "
             f"Choices: {_format_choices(options)}")
        return QAItem(
            kind="appearance_order", question=q, choices=tuple(options),
            answer=answer, answer_value=None,
            derivation="first frames " + ", ".join(f"{lbl}@{f}" for f, lbl in trio),
            labels=truth,
        )


# Question phrasing is parsed back by answer oracles; keep the regexes next
# to the templates that produce them.
_Q_PATTERNS = {
    "relative_direction": re.compile(
        r"stand at the (?P<c>.+?) and face the (?P<a>.+?), is the (?P<b>.+?) to your left"),
    "relative_distance": re.compile(r"closest to the (?P<t>.+?)\?"),
    "absolute_distance": re.compile(
        r"distance in meters between the (?P<a>.+?) and the (?P<b>.+?)\?"),
    "object_size": re.compile(r"longest dimension of the (?P<a>.+?) in meters"),
    "object_count": re.compile(r"How many instances of (?P<l>.+?) are in the scene"),
    "appearance_order": re.compile(r"order do these objects first appear"),
}

_CHOICE_SPLIT = re.compile(r"\(([A-F])\)\s*")


def parse_choices(question: str) -> list[tuple[str, str]]:
    """(letter, option text) pairs from a 'Choices: (A) x (B) y' suffix."""
    if "Choices:" not in question:
        return []
    tail = question.split("Choices:", 1)[1]
    parts = _CHOICE_SPLIT.split(tail)
    out = []
    for letter, text in zip(parts[1::2], parts[2::2]):
        out.append((letter, text.strip().rstrip(".,")))
    return out


def parse_question(question: str):
    """Recover (kind, slots, choices) from generated question text.

    Returns None when the phrasing matches no known template.
    """
    for kind, pat in _Q_PATTERNS.items():
        m = pat.search(question)
        if m:
            return kind, {k: v.strip() for k, v in m.groupdict().items()}, parse_choices(question)
    return None


def generate_questions(bundle, kinds, n: int, seed: int) -> list[QAItem]:
    """Generate ``n`` QA items round-robin over ``kinds`` with ground truth.

    ``bundle`` is a SceneBundle; ground truths derive from its SceneSpec
    (appearance order additionally uses the oracle visibility trace,
    which is itself recomputable from the spec).

    Raises:
        InsufficientObjects: a requested kind cannot produce any item.
    """
    kinds = sorted(set(kinds))
    unknown = [k for k in kinds if k not in QUESTION_KINDS]
    if unknown:
        raise ValueError(f"unknown question kinds {unknown}")
    rng = np.random.default_rng(seed)
    samplers = _Samplers(bundle, rng)
    items: list[QAItem] = []
    produced = {k: 0 for k in kinds}
    ki = 0
    stall = 0
    while len(items) < n and stall < len(kinds):
        kind = kinds[ki % len(kinds)]
        ki += 1
        item = None
        for _ in range(60):
            item = getattr(samplers, kind)()
            if item is not None:
                break
        if item is None:
            if produced[kind] == 0:
                raise InsufficientObjects(f"cannot generate any {kind} question")
            stall += 1
            continue
        stall = 0
        produced[kind] += 1
        items.append(item)
    if len(items) < n:
        raise InsufficientObjects(f"generated only {len(items)}/{n} questions")
    return items
