"""Tests for CLIPScore computation, token chunking, and dataset aggregation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from damagepipe.clip_eval import (
    ChunkScores,
    DatasetClipReport,
    EmptyCaptionError,
    ScoreConfig,
    aggregate_dataset,
    chunk_tokens,
    clip_score,
    evaluate_run,
    score_caption,
)
from damagepipe.gateway import BackendEndpoint, Embedding
from damagepipe.util import read_json

CFG = ScoreConfig()


def unit_embedding(values, model="clip") -> Embedding:
    arr = np.asarray(values, dtype=float)
    arr = arr / np.linalg.norm(arr)
    return Embedding(vector=tuple(float(v) for v in arr), dim=arr.size, model_name=model)


def random_unit(rng, dim=64) -> Embedding:
    return unit_embedding(rng.standard_normal(dim))


class TestScoreConfig:
    def test_defaults(self):
        assert CFG.w == 2.5
        assert CFG.chunk_limit == 77
        assert CFG.target == "post"

    @pytest.mark.parametrize("kwargs", [{"w": 0.0}, {"w": -1.0}, {"chunk_limit": 0}, {"target": "both"}])
    def test_invalid_config_rejected(self, kwargs):
        with pytest.raises(ValueError):
            ScoreConfig(**kwargs)


class TestClipScore:
    def test_identical_vectors_hit_ceiling(self):
        emb = unit_embedding([0.3, -0.4, 0.5, 0.1])
        assert clip_score(emb, emb, CFG) == 250.0

    def test_opposed_vectors_clamp_to_zero(self):
        a = unit_embedding([1.0, 0.0])
        b = unit_embedding([-1.0, 0.0])
        assert clip_score(a, b, CFG) == 0.0

    def test_orthogonal_vectors_score_zero(self):
        a = unit_embedding([1.0, 0.0])
        b = unit_embedding([0.0, 1.0])
        assert clip_score(a, b, CFG) == 0.0

    def test_matches_cosine_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            a, b = random_unit(rng), random_unit(rng)
            oracle = 2.5 * max(
                100.0 * float(np.dot(np.array(a.vector), np.array(b.vector))), 0.0
            )
            assert clip_score(a, b, CFG) == pytest.approx(oracle, abs=1e-9)

    def test_custom_weight_scales_linearly(self):
        rng = np.random.default_rng(7)
        a, b = random_unit(rng), random_unit(rng)
        base = clip_score(a, b, ScoreConfig(w=1.0))
        assert clip_score(a, b, ScoreConfig(w=3.0)) == pytest.approx(3.0 * base, rel=1e-12)

    def test_dim_mismatch_raises(self):
        with pytest.raises(ValueError, match="dims differ"):
            clip_score(unit_embedding([1.0, 0.0]), unit_embedding([1.0, 0.0, 0.0]), CFG)


class TestChunkTokens:
    @pytest.mark.parametrize(
        "n,expected",
        [(1, 1), (76, 1), (77, 1), (78, 2), (154, 2), (155, 3), (1000, 13)],
    )
    def test_chunk_count_at_boundaries(self, n, expected):
        chunks = chunk_tokens(list(range(n)), 77)
        assert len(chunks) == expected == math.ceil(n / 77)

    @given(st.integers(min_value=1, max_value=2000), st.integers(min_value=1, max_value=100))
    @settings(max_examples=200)
    def test_chunk_law_and_reconstruction(self, n, limit):
        ids = list(range(n))
        chunks = chunk_tokens(ids, limit)
        assert len(chunks) == math.ceil(n / limit)
        assert [i for chunk in chunks for i in chunk] == ids
        assert all(len(chunk) <= limit for chunk in chunks)
        assert all(len(chunk) == limit for chunk in chunks[:-1])

    def test_empty_input_raises(self):
        with pytest.raises(EmptyCaptionError):
            chunk_tokens([], 77)

    def test_bad_limit_raises(self):
        with pytest.raises(ValueError):
            chunk_tokens([1, 2], 0)


class TestChunkScores:
    def test_from_scores_summary(self):
        scores = ChunkScores.from_scores([10.0, 20.0, 60.0])
        assert scores.avg == pytest.approx(30.0)
        assert scores.min == 10.0
        assert scores.max == 60.0

    def test_inconsistent_summary_rejected(self):
        with pytest.raises(ValueError):
            ChunkScores(per_chunk=(10.0, 20.0), avg=99.0, min=10.0, max=20.0)

    def test_empty_rejected(self):
        with pytest.raises(EmptyCaptionError):
            ChunkScores.from_scores([])


class TestScoreCaption:
    def test_short_caption_single_chunk(self, mock_run):
        gateway, ep = mock_run.gateway, mock_run.endpoints["clip"]
        image_emb = gateway.embed(ep, "an aerial photo")
        scores = score_caption("collapsed building with debris", image_emb, ep, CFG, gateway)
        assert len(scores.per_chunk) == 1
        assert scores.avg == scores.min == scores.max == scores.per_chunk[0]

    def test_long_caption_chunks_by_token_limit(self, mock_run):
        gateway, ep = mock_run.gateway, mock_run.endpoints["clip"]
        caption = " ".join(f"word{i}" for i in range(200))  # whitespace tokenizer: 200 tokens
        image_emb = gateway.embed(ep, "an aerial photo")
        scores = score_caption(caption, image_emb, ep, CFG, gateway)
        assert len(scores.per_chunk) == math.ceil(200 / 77)
        assert min(scores.per_chunk) == scores.min
        assert max(scores.per_chunk) == scores.max

    def test_scores_are_deterministic(self, mock_run):
        gateway, ep = mock_run.gateway, mock_run.endpoints["clip"]
        image_emb = gateway.embed(ep, "an aerial photo")
        first = score_caption("rubble field", image_emb, ep, CFG, gateway)
        second = score_caption("rubble field", image_emb, ep, CFG, gateway)
        assert first == second

    @pytest.mark.parametrize("caption", ["", "   "])
    def test_empty_caption_raises(self, caption, mock_run):
        gateway, ep = mock_run.gateway, mock_run.endpoints["clip"]
        image_emb = gateway.embed(ep, "an aerial photo")
        with pytest.raises(EmptyCaptionError):
            score_caption(caption, image_emb, ep, CFG, gateway)


class TestAggregateDataset:
    def test_aggregates_over_caption_averages(self):
        captions = [
            ChunkScores.from_scores([100.0, 200.0]),  # avg 150
            ChunkScores.from_scores([50.0]),  # avg 50
            ChunkScores.from_scores([10.0, 30.0]),  # avg 20
        ]
        report = aggregate_dataset(captions, "vlm-a")
        assert report.n_captions == 3
        assert report.avg == pytest.approx((150 + 50 + 20) / 3)
        assert report.max == 150.0
        assert report.min == 20.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_dataset([], "vlm-a")

    def test_report_orders_min_avg_max(self):
        with pytest.raises(ValueError):
            DatasetClipReport(candidate_model="m", n_captions=1, avg=5.0, max=4.0, min=1.0)


class TestEvaluateRun:
    def test_scores_every_assessment_and_writes_report(self, mock_run):
        payload = evaluate_run(
            mock_run.run_dir,
            mock_run.gateway,
            mock_run.endpoints["clip"],
            CFG,
            mock_run.candidates,
        )
        assert payload["w"] == 2.5
        assert payload["chunk_limit"] == 77
        assert [r["candidate_model"] for r in payload["reports"]] == sorted(mock_run.candidates)
        n_buildings = mock_run.manifests[mock_run.candidates[0]].counts["assessments"]
        for row in payload["reports"]:
            assert row["n_captions"] == n_buildings
            assert row["min"] <= row["avg"] <= row["max"]
        on_disk = read_json(mock_run.run_dir / "clip_report.json")
        assert on_disk == payload

    def test_rerun_reuses_cached_scores(self, mock_run):
        evaluate_run(
            mock_run.run_dir, mock_run.gateway, mock_run.endpoints["clip"], CFG, mock_run.candidates
        )
        before = mock_run.backend.calls
        second = evaluate_run(
            mock_run.run_dir, mock_run.gateway, mock_run.endpoints["clip"], CFG, mock_run.candidates
        )
        assert mock_run.backend.calls == before
        assert second == read_json(mock_run.run_dir / "clip_report.json")

    def test_per_caption_files_match_report_layout(self, mock_run):
        evaluate_run(
            mock_run.run_dir, mock_run.gateway, mock_run.endpoints["clip"], CFG, mock_run.candidates
        )
        clip_root = mock_run.run_dir / "clip"
        per_caption = sorted(clip_root.rglob("*.json"))
        assert per_caption, "per-caption score files missing"
        for path in per_caption:
            record = read_json(path)
            assert record["target"] == "post"
            assert record["avg"] == pytest.approx(
                sum(record["per_chunk"]) / len(record["per_chunk"])
            )
            caption = record["caption"]
            assert caption and not caption.startswith("{")  # field captions, not raw JSON

    def test_bad_caption_source_rejected(self, mock_run):
        with pytest.raises(ValueError):
            evaluate_run(
                mock_run.run_dir,
                mock_run.gateway,
                mock_run.endpoints["clip"],
                CFG,
                mock_run.candidates,
                caption_source="verbatim",
            )
