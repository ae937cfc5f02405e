"""Preference knowledge: per-subject profiles, keywords and semantic embeddings."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import Dataset
from .llm.gateway import LLMGateway, ParseError, PromptRequest
from .prompts import Template, load_template

KP_FORMAT_VERSION = 1
FIELD_SEP = " | "
REPROMPT_NOTE = (
    "\n\nYour previous reply could not be parsed. Follow the required answer format exactly."
)


class EmptyTextError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class KnowledgeGenerationError(RuntimeError):
    """Some subjects failed; ``failures`` maps subject key to the exception."""

    def __init__(self, failures: dict[str, Exception]):
        lines = [f"{k}: {type(v).__name__}: {v}" for k, v in sorted(failures.items())]
        super().__init__(f"{len(failures)} subject(s) failed:\n" + "\n".join(lines))
        self.failures = failures


@dataclass(frozen=True)
class ConfigText:
    subject: str  # "user" or "item"
    subject_index: int
    body: str


def build_config_text(dataset: Dataset, subject: str, index: int, budget: int = 6000) -> ConfigText:
    """Concatenate catalog text for one subject.

    Items: title, category, description. Users: for each train item from
    oldest to newest, the item's title, its description and the user's
    comment on it. Bodies over ``budget`` characters keep their tail, i.e.
    the most recent interactions.
    """
    cat = dataset.catalog
    if subject == "item":
        item = dataset.item_ids[index]
        parts = [cat.item_field(item, f) if cat else "" for f in ("title", "category", "description")]
        body = "\n".join(parts)
    elif subject == "user":
        user = dataset.user_ids[index]
        blocks = []
        for i in dataset.recent_train_items(index):
            item = dataset.item_ids[i]
            if cat is None:
                blocks.append("\n\n")
                continue
            blocks.append("\n".join([
                cat.item_field(item, "title"),
                cat.item_field(item, "description"),
                cat.comments.get((user, item), ""),
            ]))
        if cat is not None:
            blocks.extend(cat.user_notes.get(user, []))
        body = "\n".join(blocks)
    else:
        raise ValueError(f"unknown subject kind {subject!r}")
    if not body.strip():
        raise EmptyTextError(f"{subject} {index} has no catalog text")
    if len(body) > budget:
        body = body[-budget:]
    return ConfigText(subject, index, body)


def _subject_key(kind: str, ext_id: str) -> str:
    return f"{kind}:{ext_id}"


def _run_requests(gateway: LLMGateway, keys: list[str], requests: list[PromptRequest]) -> list[str]:
    out = gateway.complete_many(requests, return_exceptions=True)
    failures = {k: r for k, r in zip(keys, out) if isinstance(r, Exception)}
    if failures:
        raise KnowledgeGenerationError(failures)
    return out


def generate_profiles(
    gateway: LLMGateway,
    dataset: Dataset,
    user_template: Template | None = None,
    item_template: Template | None = None,
    budget: int = 6000,
) -> tuple[list[str], list[str]]:
    """One profile per user and per item, each from an independent request."""
    user_template = user_template or load_template("profile_user")
    item_template = item_template or load_template("profile_item")
    keys, requests = [], []
    for kind, ids, tmpl in (("user", dataset.user_ids, user_template), ("item", dataset.item_ids, item_template)):
        for idx, ext in enumerate(ids):
            key = _subject_key(kind, ext)
            try:
                text = build_config_text(dataset, kind, idx, budget).body
            except EmptyTextError as exc:
                raise KnowledgeGenerationError({key: exc}) from None
            keys.append(key)
            requests.append(tmpl.request(subject_id=ext, config_text=text))
    texts = _run_requests(gateway, keys, requests)
    return texts[:dataset.num_users], texts[dataset.num_users:]


_LABEL = re.compile(r"^\s*keywords?\s*:\s*", re.IGNORECASE)


def parse_keywords(text: str, max_keywords: int = 10) -> list[str]:
    """First non-empty line, split on commas, lowercased and deduplicated.

    Keywords longer than five words are dropped.
    """
    line = next((ln for ln in text.splitlines() if ln.strip()), "")
    line = _LABEL.sub("", line)
    out: list[str] = []
    for raw in line.split(","):
        kw = " ".join(raw.strip().strip("\"'.;").lower().split())
        if kw and len(kw.split()) <= 5 and kw not in out:
            out.append(kw)
    if not out:
        raise ParseError("no keywords found", text)
    return out[:max_keywords]


def complete_with_reprompt(gateway: LLMGateway, request: PromptRequest, parse):
    """Call, parse, and retry once with a format reminder before giving up."""
    text = gateway.complete(request)
    try:
        return parse(text), text
    except ParseError:
        retry = PromptRequest(
            request.system_text, request.user_text + REPROMPT_NOTE,
            request.max_tokens, request.temperature, request.tag,
        )
        text = gateway.complete(retry)
        return parse(text), text


def condense_keywords(
    gateway: LLMGateway,
    subjects: Sequence[tuple[str, str, str]],
    template: Template | None = None,
    max_keywords: int = 10,
) -> list[list[str]]:
    """Keyword sets for ``(kind, external id, profile)`` triples, in order."""
    template = template or load_template("keywords")

    def one(subject):
        kind, ext, profile = subject
        req = template.request(subject_kind=kind, subject_id=ext, profile=profile, max_keywords=max_keywords)
        return complete_with_reprompt(gateway, req, lambda t: parse_keywords(t, max_keywords))[0]

    out = gateway.map(one, list(subjects), return_exceptions=True)
    failures = {_subject_key(k, e): r for (k, e, _), r in zip(subjects, out) if isinstance(r, Exception)}
    if failures:
        raise KnowledgeGenerationError(failures)
    return out


class ProjectionHead(nn.Module):
    """Maps pooled text embeddings (d_t) into the model space (d)."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 0, seed: int = 0):
        super().__init__()
        self.in_dim, self.out_dim, self.hidden = in_dim, out_dim, hidden
        gen = torch.Generator().manual_seed(seed)
        if hidden:
            self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))
        else:
            self.net = nn.Linear(in_dim, out_dim)
        with torch.no_grad():
            for m in self.net.modules():
                if isinstance(m, nn.Linear):
                    m.weight.normal_(0.0, m.in_features ** -0.5, generator=gen)
                    m.bias.zero_()

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.net(t)


def combined_text(profile: str, keywords: Sequence[str]) -> str:
    return profile + FIELD_SEP + ", ".join(keywords)


@dataclass(eq=False)
class PreferenceKnowledge:
    user_profiles: list[str]
    item_profiles: list[str]
    user_keywords: list[list[str]]
    item_keywords: list[list[str]]
    pooled_users: np.ndarray  # |U| x d_t
    pooled_items: np.ndarray  # |I| x d_t
    emb_users: np.ndarray  # |U| x d, projection at generation time
    emb_items: np.ndarray

    @property
    def dim(self) -> int:
        return self.emb_users.shape[1]

    @property
    def text_dim(self) -> int:
        return self.pooled_users.shape[1]

    def save(self, path: str | Path) -> None:
        header = {
            "format": "llard-kp", "version": KP_FORMAT_VERSION,
            "num_users": len(self.user_profiles), "num_items": len(self.item_profiles),
            "d": self.dim, "d_t": self.text_dim,
        }
        with open(path, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
            for mat in (self.emb_users, self.emb_items, self.pooled_users, self.pooled_items):
                fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())
            for kind, profiles, kws in (("u", self.user_profiles, self.user_keywords),
                                        ("i", self.item_profiles, self.item_keywords)):
                for idx, (p, k) in enumerate(zip(profiles, kws)):
                    fh.write(f"{kind}\t{idx}\t{_escape(p)}\t{_escape(', '.join(k))}\n".encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> "PreferenceKnowledge":
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        h = json.loads(raw[:nl])
        if h.get("format") != "llard-kp" or h.get("version") != KP_FORMAT_VERSION:
            raise ValueError(f"{path}: not a preference-knowledge artifact")
        nu, ni, d, dt = h["num_users"], h["num_items"], h["d"], h["d_t"]
        pos = nl + 1
        mats = []
        for rows, cols in ((nu, d), (ni, d), (nu, dt), (ni, dt)):
            n = rows * cols * 4
            mats.append(np.frombuffer(raw[pos:pos + n], dtype="<f4").reshape(rows, cols).copy())
            pos += n
        profiles = {"u": [""] * nu, "i": [""] * ni}
        keywords = {"u": [[] for _ in range(nu)], "i": [[] for _ in range(ni)]}
        for line in raw[pos:].decode("utf-8").splitlines():
            kind, idx, p, k = line.split("\t")
            profiles[kind][int(idx)] = _unescape(p)
            kw = _unescape(k)
            keywords[kind][int(idx)] = kw.split(", ") if kw else []
        return cls(
            profiles["u"], profiles["i"], keywords["u"], keywords["i"],
            pooled_users=mats[2], pooled_items=mats[3], emb_users=mats[0], emb_items=mats[1],
        )


def _escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(s: str) -> str:
    out, it = [], iter(s)
    for ch in it:
        if ch == "\\":
            nxt = next(it, "")
            out.append({"t": "\t", "n": "\n", "\\": "\\"}.get(nxt, nxt))
        else:
            out.append(ch)
    return "".join(out)


def project(head: ProjectionHead, pooled: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        t = torch.as_tensor(np.asarray(pooled, dtype=np.float32))
        return head(t.to(next(head.parameters()).dtype)).numpy().astype(np.float32)


def embed_preferences(
    gateway: LLMGateway,
    user_profiles: Sequence[str],
    item_profiles: Sequence[str],
    user_keywords: Sequence[Sequence[str]],
    item_keywords: Sequence[Sequence[str]],
    head: ProjectionHead,
) -> PreferenceKnowledge:
    texts = [combined_text(p, k) for p, k in zip(user_profiles, user_keywords)]
    texts += [combined_text(p, k) for p, k in zip(item_profiles, item_keywords)]
    vecs = gateway.embed_many(texts, return_exceptions=True)
    failures = {f"subject:{n}": v for n, v in enumerate(vecs) if isinstance(v, Exception)}
    if failures:
        raise KnowledgeGenerationError(failures)
    dims = {len(v) for v in vecs}
    if len(dims) > 1 or (vecs and dims.pop() != head.in_dim):
        raise ConfigurationError(f"provider embedding size does not match projection input {head.in_dim}")
    pooled = np.asarray(vecs, dtype=np.float32).reshape(len(texts), head.in_dim)
    nu = len(user_profiles)
    emb = project(head, pooled)
    return PreferenceKnowledge(
        list(user_profiles), list(item_profiles),
        [list(k) for k in user_keywords], [list(k) for k in item_keywords],
        pooled[:nu], pooled[nu:], emb[:nu], emb[nu:],
    )


def generate_preference_knowledge(
    gateway: LLMGateway,
    dataset: Dataset,
    dim: int = 64,
    text_dim: int | None = None,
    head_hidden: int = 0,
    seed: int = 0,
    max_keywords: int = 10,
    budget: int = 6000,
) -> PreferenceKnowledge:
    """Profiles -> keywords -> pooled embeddings -> projected rows."""
    users, items = generate_profiles(gateway, dataset, budget=budget)
    subjects = [("user", e, p) for e, p in zip(dataset.user_ids, users)]
    subjects += [("item", e, p) for e, p in zip(dataset.item_ids, items)]
    kws = condense_keywords(gateway, subjects, max_keywords=max_keywords)
    if text_dim is None:
        text_dim = len(gateway.embed_text(combined_text(users[0], kws[0])))
    head = ProjectionHead(text_dim, dim, head_hidden, seed)
    return embed_preferences(gateway, users, items, kws[:len(users)], kws[len(users):], head)
