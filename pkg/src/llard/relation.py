"""Relation knowledge: a four-step user-centric reasoning pipeline over the
interaction graph producing noise, collaborative and interest edge sets."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .data import DataError, Dataset, InteractionGraph, graph_from_edges
from .llm.gateway import LLMGateway, ParseError
from .preference import KnowledgeGenerationError, PreferenceKnowledge, complete_with_reprompt
from .prompts import load_template

log = logging.getLogger(__name__)

KR_FORMAT_VERSION = 1


class Rating(str, Enum):
    HIGH = "High"
    MEDIUM = "Medium"
    LOW = "Low"


class RelationValidationError(DataError):
    pass


@dataclass
class RatedNeighborhood:
    user: int
    entries: list[tuple[int, Rating]]
    unknown_ids: int = 0

    def with_rating(self, rating: Rating) -> list[int]:
        return [i for i, r in self.entries if r is rating]


@dataclass
class PipelineLimits:
    max_first_hop: int = 50
    max_second_hop: int = 20
    max_third_hop: int = 30


@dataclass
class UserRelations:
    user: int
    noise: set[int] = field(default_factory=set)
    collab: set[int] = field(default_factory=set)
    interests: set[int] = field(default_factory=set)
    transcript: str = ""


# -- response grammar ---------------------------------------------------------------

_RATING_LINE = re.compile(r"^\s*(.+?)\s*:\s*(high|medium|low)\s*\.?\s*$", re.IGNORECASE)
_ANSWER_LINE = re.compile(r"^\s*ANSWER\s*:\s*(.*?)\s*$", re.IGNORECASE)


def parse_ratings(text: str) -> list[tuple[str, Rating]]:
    out = []
    for line in text.splitlines():
        m = _RATING_LINE.match(line)
        if m:
            out.append((m.group(1).strip(), Rating(m.group(2).capitalize())))
    if not out:
        raise ParseError("no '<id>: High|Medium|Low' lines", text)
    return out


def parse_answer(text: str) -> list[str]:
    """Ids from the last ``ANSWER:`` line; ``NONE`` means no ids."""
    answer = None
    for line in text.splitlines():
        m = _ANSWER_LINE.match(line)
        if m:
            answer = m.group(1)
    if answer is None:
        raise ParseError("missing 'ANSWER:' line", text)
    if answer.strip().upper() in ("NONE", ""):
        return []
    return [tok.strip() for tok in answer.split(",") if tok.strip()]


# -- helpers -------------------------------------------------------------------------


def _kw(keywords: list[str]) -> str:
    return ", ".join(keywords)


def _user_fields(user: int, kp: PreferenceKnowledge, dataset: Dataset) -> dict:
    return dict(
        user_id=dataset.user_ids[user],
        profile=" ".join(kp.user_profiles[user].split()),
        user_keywords=_kw(kp.user_keywords[user]),
    )


def _item_lines(items, kp: PreferenceKnowledge, dataset: Dataset) -> str:
    return "\n".join(f"{dataset.item_ids[i]}: {_kw(kp.item_keywords[i])}" for i in items)


def _user_lines(users, kp: PreferenceKnowledge, dataset: Dataset) -> str:
    return "\n".join(f"{dataset.user_ids[u]}: {_kw(kp.user_keywords[u])}" for u in users)


def _select(ids: list[str], lookup: dict[str, int], allowed: set[int]) -> set[int]:
    out = set()
    for ident in ids:
        idx = lookup.get(ident)
        if idx is not None and idx in allowed:
            out.add(idx)
    return out


# -- pipeline steps ----------------------------------------------------------------------


def rate_neighborhood(
    gateway: LLMGateway, user: int, kp: PreferenceKnowledge, dataset: Dataset,
    max_first_hop: int = 50,
) -> tuple[RatedNeighborhood, str]:
    """Step 1: rate the user's most recent train items High/Medium/Low.

    Items the response does not mention are rated Medium; ids outside the
    neighborhood are ignored and counted.
    """
    recent = dataset.recent_train_items(user)[::-1][:max_first_hop]
    if not recent:
        raise DataError(f"user {user} has no train interactions")
    req = load_template("rate").request(items=_item_lines(recent, kp, dataset), **_user_fields(user, kp, dataset))
    parsed, raw = complete_with_reprompt(gateway, req, parse_ratings)
    labels: dict[int, Rating] = {}
    unknown = 0
    allowed = set(recent)
    for ident, rating in parsed:
        idx = dataset.item_index.get(ident)
        if idx is None or idx not in allowed:
            unknown += 1
            continue
        labels.setdefault(idx, rating)
    if unknown:
        log.warning("user %s: %d unknown item id(s) in rating response", dataset.user_ids[user], unknown)
    entries = [(i, labels.get(i, Rating.MEDIUM)) for i in recent]
    return RatedNeighborhood(user, entries, unknown), raw


def identify_noise(
    gateway: LLMGateway, rated: RatedNeighborhood, kp: PreferenceKnowledge, dataset: Dataset,
) -> tuple[set[int], str]:
    """Step 2: pick noise among the Low-rated items (no call when there are none)."""
    candidates = rated.with_rating(Rating.LOW)
    if not candidates:
        return set(), ""
    req = load_template("noise").request(
        candidates=_item_lines(candidates, kp, dataset), **_user_fields(rated.user, kp, dataset))
    ids, raw = complete_with_reprompt(gateway, req, parse_answer)
    return _select(ids, dataset.item_index, set(candidates)), raw


def second_hop(rated: RatedNeighborhood, dataset: Dataset, cap: int = 20) -> list[int]:
    """Co-users of the High items, ranked by shared High count then index."""
    counts: Counter[int] = Counter()
    for i in rated.with_rating(Rating.HIGH):
        for v in dataset.item_users[i]:
            if v != rated.user:
                counts[int(v)] += 1
    return sorted(counts, key=lambda v: (-counts[v], v))[:cap]


def collaborative_enhancement(
    gateway: LLMGateway, rated: RatedNeighborhood, kp: PreferenceKnowledge, dataset: Dataset,
    max_second_hop: int = 20,
) -> tuple[set[int], str]:
    """Step 3: select similar users among second-hop neighbors."""
    candidates = second_hop(rated, dataset, max_second_hop)
    if not candidates:
        return set(), ""
    high = ", ".join(dataset.item_ids[i] for i in rated.with_rating(Rating.HIGH))
    req = load_template("collab").request(
        high_items=high, candidates=_user_lines(candidates, kp, dataset),
        **_user_fields(rated.user, kp, dataset))
    ids, raw = complete_with_reprompt(gateway, req, parse_answer)
    return _select(ids, dataset.user_index, set(candidates)), raw


def third_hop(user: int, collab_users, dataset: Dataset, cap: int = 30) -> list[int]:
    """Items of the collaborative users outside the user's own train items."""
    own = set(dataset.train_items[user].tolist())
    counts: Counter[int] = Counter()
    for v in collab_users:
        for i in dataset.train_items[v]:
            if int(i) not in own:
                counts[int(i)] += 1
    return sorted(counts, key=lambda i: (-counts[i], i))[:cap]


def explore_interests(
    gateway: LLMGateway, rated: RatedNeighborhood, collab_users: set[int], kp: PreferenceKnowledge,
    dataset: Dataset, max_third_hop: int = 30,
) -> tuple[set[int], str]:
    """Step 4: select latent-interest items reachable through the collaborative users."""
    candidates = third_hop(rated.user, sorted(collab_users), dataset, max_third_hop)
    if not candidates:
        return set(), ""
    similar = ", ".join(dataset.user_ids[v] for v in sorted(collab_users))
    req = load_template("interest").request(
        similar_users=similar, candidates=_item_lines(candidates, kp, dataset),
        **_user_fields(rated.user, kp, dataset))
    ids, raw = complete_with_reprompt(gateway, req, parse_answer)
    return _select(ids, dataset.item_index, set(candidates)), raw


def run_user_pipeline(
    gateway: LLMGateway, user: int, kp: PreferenceKnowledge, dataset: Dataset,
    limits: PipelineLimits | None = None,
) -> UserRelations:
    limits = limits or PipelineLimits()
    rated, t1 = rate_neighborhood(gateway, user, kp, dataset, limits.max_first_hop)
    noise, t2 = identify_noise(gateway, rated, kp, dataset)
    collab, t3 = collaborative_enhancement(gateway, rated, kp, dataset, limits.max_second_hop)
    interests, t4 = explore_interests(gateway, rated, collab, kp, dataset, limits.max_third_hop)
    transcript = "\n".join(
        f"## {name}\n{text.strip()}"
        for name, text in (("ratings", t1), ("noise", t2), ("collab", t3), ("interests", t4)) if text
    )
    return UserRelations(user, noise, collab, interests, transcript)


# -- assembly --------------------------------------------------------------------------


@dataclass(eq=False)
class RelationKnowledge:
    noise_edges: set[tuple[int, int]] = field(default_factory=set)  # (user, item)
    collab_edges: set[tuple[int, int]] = field(default_factory=set)  # (user, user), first < second
    interest_edges: set[tuple[int, int]] = field(default_factory=set)  # (user, item)
    transcripts: dict[int, str] = field(default_factory=dict)

    def validate(self, dataset: Dataset) -> None:
        nu, ni = dataset.num_users, dataset.num_items
        for name, edges, second in (("noise", self.noise_edges, ni), ("interest", self.interest_edges, ni),
                                    ("collab", self.collab_edges, nu)):
            for a, b in edges:
                if not (0 <= a < nu and 0 <= b < second):
                    raise RelationValidationError(f"{name} edge {(a, b)} out of range")
        train = {(int(u), int(i)) for u, i in dataset.train}
        if not self.noise_edges <= train:
            raise RelationValidationError("noise edges must be train edges")
        if self.interest_edges & train:
            raise RelationValidationError("interest edges must not be train edges")
        if any(a >= b for a, b in self.collab_edges):
            raise RelationValidationError("collab edges must be (smaller, larger) distinct user pairs")

    def save(self, path: str | Path) -> None:
        header = {"format": "llard-kr", "version": KR_FORMAT_VERSION,
                  "noise": len(self.noise_edges), "collab": len(self.collab_edges),
                  "interests": len(self.interest_edges), "transcripts": len(self.transcripts)}
        with open(path, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
            for edges in (self.noise_edges, self.collab_edges, self.interest_edges):
                for a, b in sorted(edges):
                    fh.write(f"{a}\t{b}\n".encode("ascii"))
            for user, text in sorted(self.transcripts.items()):
                blob = text.encode("utf-8")
                fh.write(f"{user}\t{len(blob)}\n".encode("ascii") + blob + b"\n")

    @classmethod
    def load(cls, path: str | Path) -> "RelationKnowledge":
        raw = Path(path).read_bytes()
        pos = raw.index(b"\n") + 1
        h = json.loads(raw[:pos])
        if h.get("format") != "llard-kr" or h.get("version") != KR_FORMAT_VERSION:
            raise ValueError(f"{path}: not a relation-knowledge artifact")
        sections = []
        for name in ("noise", "collab", "interests"):
            edges = set()
            for _ in range(h[name]):
                end = raw.index(b"\n", pos)
                a, b = raw[pos:end].split(b"\t")
                edges.add((int(a), int(b)))
                pos = end + 1
            sections.append(edges)
        transcripts = {}
        for _ in range(h["transcripts"]):
            end = raw.index(b"\n", pos)
            user, length = raw[pos:end].split(b"\t")
            start = end + 1
            transcripts[int(user)] = raw[start:start + int(length)].decode("utf-8")
            pos = start + int(length) + 1
        return cls(*sections, transcripts=transcripts)


def build_relation_knowledge(results: list[UserRelations]) -> RelationKnowledge:
    kr = RelationKnowledge()
    for r in results:
        kr.noise_edges.update((r.user, i) for i in r.noise)
        kr.collab_edges.update((min(r.user, v), max(r.user, v)) for v in r.collab if v != r.user)
        kr.interest_edges.update((r.user, i) for i in r.interests)
        if r.transcript:
            kr.transcripts[r.user] = r.transcript
    return kr


def generate_relation_knowledge(
    gateway: LLMGateway, dataset: Dataset, kp: PreferenceKnowledge,
    users: list[int] | None = None, limits: PipelineLimits | None = None,
) -> RelationKnowledge:
    """Run the per-user pipeline for ``users`` (default: every user with train data)."""
    if users is None:
        users = [u for u in range(dataset.num_users) if len(dataset.train_items[u])]
    def one(u):
        try:
            return run_user_pipeline(gateway, u, kp, dataset, limits)
        except Exception as exc:
            return exc

    if gateway.max_parallel > 1 and len(users) > 1:
        with ThreadPoolExecutor(max_workers=gateway.max_parallel) as pool:
            results = list(pool.map(one, users))
    else:
        results = [one(u) for u in users]
    failures = {f"user:{dataset.user_ids[u]}": r for u, r in zip(users, results) if isinstance(r, Exception)}
    if failures:
        raise KnowledgeGenerationError(failures)
    kr = build_relation_knowledge(results)
    kr.validate(dataset)
    return kr


def enriched_edge_set(dataset: Dataset, kr: RelationKnowledge) -> set[tuple[int, int]]:
    """(E minus noise) plus collab plus interest edges, as unified node pairs."""
    nu = dataset.num_users
    kept = {(int(u), int(i)) for u, i in dataset.train} - kr.noise_edges
    out = {(u, nu + i) for u, i in kept}
    out |= {(a, b) for a, b in kr.collab_edges}
    out |= {(u, nu + i) for u, i in kr.interest_edges}
    return out


def build_enriched_graph(dataset: Dataset, kr: RelationKnowledge) -> InteractionGraph:
    kr.validate(dataset)
    edges = np.asarray(sorted(enriched_edge_set(dataset, kr)), dtype=np.int64).reshape(-1, 2)
    return graph_from_edges(dataset.num_users, dataset.num_items, edges)
