"""Offline stand-in for an LLM, driven by a keyword rule table.

The mock reads the structured fields the prompt templates emit (``Subject:``,
``User keywords:``, candidate lines ``<id>: <kw>, <kw>``) and answers in the
same grammar a real model is asked for. It is a pure function of the request
and its rules.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .gateway import PromptRequest

_TOKEN = re.compile(r"[a-z0-9]+")


@dataclass
class MockRules:
    vocabulary: list[str] = field(default_factory=list)
    subject_keywords: dict[str, list[str]] = field(default_factory=dict)  # "user:<id>" / "item:<id>"
    related: dict[str, list[str]] = field(default_factory=dict)
    collab_jaccard: float = 0.5
    dominance: float = 0.5
    embed_dim: int = 64
    max_selected: int | None = None  # cap on users/items picked in the collab and interest steps

    @classmethod
    def load(cls, path: str | Path) -> "MockRules":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _find_terms(text: str, terms: list[str]) -> list[tuple[str, int, int]]:
    """(term, count, first position) for each vocabulary term found in text."""
    low = text.lower()
    found = []
    for term in terms:
        hits = [m.start() for m in re.finditer(r"\b" + re.escape(term.lower()) + r"\b", low)]
        if hits:
            found.append((term.lower(), len(hits), hits[0]))
    return found


def _field(text: str, name: str) -> str | None:
    for line in text.splitlines():
        if line.startswith(name + ":"):
            return line[len(name) + 1:].strip()
    return None


def _kw_list(value: str | None) -> list[str]:
    if not value:
        return []
    return [k.strip().lower() for k in value.split(",") if k.strip()]


def _entries(text: str, header: str) -> list[tuple[str, list[str]]]:
    lines = text.splitlines()
    try:
        start = lines.index(header + ":") + 1
    except ValueError:
        return []
    out = []
    for line in lines[start:]:
        if not line.strip():
            break
        ident, _, rest = line.partition(":")
        out.append((ident.strip(), _kw_list(rest)))
    return out


@lru_cache(maxsize=65536)
def hash_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    return np.random.default_rng(seed).standard_normal(dim)


class MockProvider:
    model = "mock-llm"

    def __init__(self, rules: MockRules | None = None):
        self.rules = rules or MockRules()

    # -- helpers ---------------------------------------------------------------

    def _related(self, kws: list[str]) -> set[str]:
        out: set[str] = set()
        for k in kws:
            out.update(x.lower() for x in self.rules.related.get(k, []))
        return out

    def _subject(self, text: str) -> tuple[str, str] | None:
        value = _field(text, "Subject")
        if value is None:
            return None
        kind, _, ident = value.partition(" ")
        return kind, ident

    def _dominant_terms(self, text: str) -> list[str]:
        found = _find_terms(text, self.rules.vocabulary)
        if not found:
            return []
        top = max(c for _, c, _ in found)
        keep = [f for f in found if f[1] >= self.rules.dominance * top]
        order = {t.lower(): k for k, t in enumerate(self.rules.vocabulary)}
        keep.sort(key=lambda f: (-f[1], order[f[0]]))
        return [t for t, _, _ in keep]

    # -- provider interface ----------------------------------------------------

    def complete(self, request: PromptRequest) -> str:
        handler = getattr(self, "_" + request.tag.split(":")[0].replace("-", "_"), None)
        if handler is None:
            return "ANSWER: NONE"
        return handler(request.user_text)

    def _profile(self, text: str) -> str:
        subject = self._subject(text)
        kws = None
        if subject is not None:
            kws = self.rules.subject_keywords.get(f"{subject[0]}:{subject[1]}")
        if kws is None:
            kws = self._dominant_terms(text)
        if not kws:
            return "No clear preference signal; general interests."
        return "Shows a consistent taste for " + ", ".join(kws) + "."

    _profile_user = _profile
    _profile_item = _profile

    def _keywords(self, text: str) -> str:
        subject = self._subject(text)
        if subject is not None:
            table = self.rules.subject_keywords.get(f"{subject[0]}:{subject[1]}")
            if table is not None:
                return ", ".join(table)
        profile = _field(text, "Profile") or ""
        found = sorted(_find_terms(profile, self.rules.vocabulary), key=lambda f: f[2])
        return ", ".join(t for t, _, _ in found) or "general"

    def _rate(self, text: str) -> str:
        user_kw = set(_kw_list(_field(text, "User keywords")))
        related = self._related(sorted(user_kw))
        lines = []
        for ident, kws in _entries(text, "Items"):
            if user_kw & set(kws):
                label = "High"
            elif related & set(kws):
                label = "Medium"
            else:
                label = "Low"
            lines.append(f"{ident}: {label}")
        return "\n".join(lines)

    def _cap(self, picked: list[str], reasons: list[str]) -> tuple[list[str], list[str]]:
        n = self.rules.max_selected
        return (picked, reasons) if n is None else (picked[:n], reasons[:n])

    def _answer(self, picked: list[str], reasons: list[str]) -> str:
        body = [f"Reason: {r}" for r in reasons]
        body.append("ANSWER: " + (", ".join(picked) if picked else "NONE"))
        return "\n".join(body)

    def _noise(self, text: str) -> str:
        user_kw = set(_kw_list(_field(text, "User keywords")))
        latent = self._related(sorted(user_kw))
        picked, reasons = [], []
        for ident, kws in _entries(text, "Candidates"):
            if (user_kw | latent) & set(kws):
                reasons.append(f"{ident} links to a latent interest; kept")
            else:
                picked.append(ident)
                reasons.append(f"{ident} shares nothing with the profile")
        return self._answer(picked, reasons)

    def _collab(self, text: str) -> str:
        user_kw = set(_kw_list(_field(text, "User keywords")))
        picked, reasons = [], []
        for ident, kws in _entries(text, "Candidates"):
            union = user_kw | set(kws)
            jac = len(user_kw & set(kws)) / len(union) if union else 0.0
            if jac >= self.rules.collab_jaccard:
                picked.append(ident)
                reasons.append(f"{ident} keyword overlap {jac:.2f}")
        return self._answer(*self._cap(picked, reasons))

    def _interest(self, text: str) -> str:
        user_kw = set(_kw_list(_field(text, "User keywords")))
        picked = [ident for ident, kws in _entries(text, "Candidates") if user_kw & set(kws)]
        return self._answer(*self._cap(picked, [f"{i} matches the user's keywords" for i in picked]))

    def embed(self, text: str) -> np.ndarray:
        """Unit vector: normalized sum of per-token hash vectors."""
        dim = self.rules.embed_dim
        tokens = _TOKEN.findall(text.lower())
        if tokens:
            vec = np.zeros(dim)
            for tok in tokens:
                vec += hash_vector(tok, dim)
        else:
            vec = hash_vector("\x00" + text, dim)
        norm = np.linalg.norm(vec)
        if norm == 0:
            vec = hash_vector("\x01" + text, dim)
            norm = np.linalg.norm(vec)
        return vec / norm
