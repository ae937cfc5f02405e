import numpy as np
import pytest
import torch

from llard.data import TextCatalog
from llard.llm.gateway import LLMGateway, ParseError, PromptRequest
from llard.llm.mock import MockProvider, MockRules
from llard.preference import (
    REPROMPT_NOTE,
    ConfigurationError,
    EmptyTextError,
    KnowledgeGenerationError,
    PreferenceKnowledge,
    ProjectionHead,
    build_config_text,
    complete_with_reprompt,
    embed_preferences,
    generate_preference_knowledge,
    parse_keywords,
)

from conftest import make_dataset, toy_catalog


class Scripted:
    """Replies from a fixed list, recording every request."""

    model = "scripted"

    def __init__(self, replies, dim=4):
        self.replies = list(replies)
        self.requests = []
        self.dim = dim

    def complete(self, request):
        self.requests.append(request)
        return self.replies.pop(0)

    def embed(self, text):
        return np.ones(self.dim)


def test_item_body_is_title_category_description():
    cat = TextCatalog(items={"i0": {"title": "T", "category": "C", "description": "D"}})
    ds = make_dataset(1, 1, [(0, 0)], catalog=cat)
    assert build_config_text(ds, "item", 0).body == "T\nC\nD"


def test_user_body_includes_comment():
    cat = TextCatalog(items={"i0": {"title": "T", "category": "C", "description": "D"}},
                      comments={("u0", "i0"): "good"})
    ds = make_dataset(1, 1, [(0, 0)], catalog=cat)
    assert build_config_text(ds, "user", 0).body == "T\nD\ngood"


def test_user_items_ordered_oldest_first():
    cat = toy_catalog(1, 2, ["alpha", "beta"])
    ds = make_dataset(1, 2, [(0, 0), (0, 1)], catalog=cat, timestamps={(0, 0): 20, (0, 1): 10})
    body = build_config_text(ds, "user", 0).body
    assert body.index("beta") < body.index("alpha")


def test_budget_keeps_tail():
    cat = TextCatalog(items={"i0": {"title": "x" * 50, "category": "", "description": "END"}})
    ds = make_dataset(1, 1, [(0, 0)], catalog=cat)
    body = build_config_text(ds, "item", 0, budget=10).body
    assert len(body) == 10 and body.endswith("END")


def test_missing_text_is_an_error():
    ds = make_dataset(1, 1, [(0, 0)])
    with pytest.raises(EmptyTextError):
        build_config_text(ds, "item", 0)


class TestKeywords:
    def test_dedup_lowercase_and_label(self):
        assert parse_keywords("Keywords: Jazz, jazz , Blues.\nignored") == ["jazz", "blues"]

    def test_cap(self):
        assert parse_keywords(", ".join(f"k{n}" for n in range(20)), max_keywords=10) == [f"k{n}" for n in range(10)]

    def test_long_phrases_dropped(self):
        assert parse_keywords("a b c d e f, short") == ["short"]

    def test_nothing_usable(self):
        with pytest.raises(ParseError):
            parse_keywords("\n   \n")


class TestReprompt:
    def test_second_attempt_carries_reminder(self):
        provider = Scripted(["", "jazz, blues"])
        out, raw = complete_with_reprompt(LLMGateway(provider), PromptRequest("s", "u"), parse_keywords)
        assert out == ["jazz", "blues"] and raw == "jazz, blues"
        assert provider.requests[1].user_text == "u" + REPROMPT_NOTE

    def test_two_failures_raise(self):
        with pytest.raises(ParseError):
            complete_with_reprompt(LLMGateway(Scripted([" ", " "])), PromptRequest("s", "u"), parse_keywords)


class TestProjection:
    def test_zero_input_gives_bias(self):
        head = ProjectionHead(5, 3, seed=1)
        with torch.no_grad():
            head.net.bias.copy_(torch.tensor([0.5, -1.0, 2.0]))
        assert torch.equal(head(torch.zeros(2, 5)), torch.tensor([[0.5, -1.0, 2.0]] * 2))

    def test_affine(self):
        head = ProjectionHead(4, 3, seed=0)
        a, b = torch.randn(4), torch.randn(4)
        lin = head(a + b) - head(torch.zeros(4))
        assert torch.allclose(lin, head(a) + head(b) - 2 * head(torch.zeros(4)), atol=1e-6)

    def test_hidden_layer_shape_and_seed(self):
        h1, h2 = ProjectionHead(6, 2, hidden=8, seed=3), ProjectionHead(6, 2, hidden=8, seed=3)
        x = torch.randn(4, 6)
        assert h1(x).shape == (4, 2) and torch.equal(h1(x), h2(x))


def mock_kp(ds, **kw):
    rules = MockRules(vocabulary=["jazz", "rock", "opera"], embed_dim=16)
    return generate_preference_knowledge(LLMGateway(MockProvider(rules)), ds, dim=8, **kw)


def jazz_dataset():
    cat = toy_catalog(3, 6, ["jazz", "rock", "opera"])
    return make_dataset(3, 6, [(0, 0), (0, 3), (1, 1), (1, 4), (2, 2), (2, 5)], catalog=cat)


class TestGeneration:
    def test_shapes_and_keywords(self):
        kp = mock_kp(jazz_dataset())
        assert kp.emb_users.shape == (3, 8) and kp.emb_items.shape == (6, 8)
        assert kp.pooled_users.shape == (3, 16) and kp.text_dim == 16 and kp.dim == 8
        assert kp.user_keywords == [["jazz"], ["rock"], ["opera"]]
        assert np.allclose(np.linalg.norm(kp.pooled_items, axis=1), 1.0, atol=1e-6)

    def test_round_trip_is_exact(self, tmp_path):
        kp = mock_kp(jazz_dataset())
        kp.user_profiles[0] = "tab\there\nnewline \\ backslash"
        kp.save(tmp_path / "a.kp")
        back = PreferenceKnowledge.load(tmp_path / "a.kp")
        assert back.user_profiles == kp.user_profiles and back.item_keywords == kp.item_keywords
        for name in ("emb_users", "emb_items", "pooled_users", "pooled_items"):
            assert np.array_equal(getattr(back, name), getattr(kp, name))
        back.save(tmp_path / "b.kp")
        assert (tmp_path / "a.kp").read_bytes() == (tmp_path / "b.kp").read_bytes()

    def test_deterministic_bytes(self, tmp_path):
        mock_kp(jazz_dataset()).save(tmp_path / "a.kp")
        mock_kp(jazz_dataset()).save(tmp_path / "b.kp")
        assert (tmp_path / "a.kp").read_bytes() == (tmp_path / "b.kp").read_bytes()

    def test_failures_are_aggregated(self):
        class Flaky(MockProvider):
            def complete(self, request):
                if "Subject: item i4" in request.user_text:
                    raise RuntimeError("provider down")
                return super().complete(request)

        with pytest.raises(KnowledgeGenerationError) as info:
            generate_preference_knowledge(LLMGateway(Flaky(MockRules(vocabulary=["jazz"]))), jazz_dataset())
        assert list(info.value.failures) == ["item:i4"]

    def test_embedding_size_mismatch(self):
        head = ProjectionHead(7, 2)
        with pytest.raises(ConfigurationError):
            embed_preferences(LLMGateway(Scripted([], dim=4)), ["p"], ["q"], [["a"]], [["b"]], head)

    def test_missing_catalog_reported(self):
        ds = make_dataset(1, 1, [(0, 0)])
        with pytest.raises(KnowledgeGenerationError):
            mock_kp(ds)
