"""Tests for response parsing, crop extraction, and the assessment pipeline."""

import json
from dataclasses import replace

import numpy as np
import pytest

from damagepipe.assess import (
    AssessmentParseError,
    AssessOptions,
    assessment_caption,
    assessment_summary_text,
    crop_pair,
    extract_first_json_object,
    iter_assessment_files,
    parse_assessment,
    query_with_repair,
    read_assessment,
    run_event,
)
from damagepipe.gateway import BackendEndpoint, ChatRequest, Gateway
from damagepipe.geometry import BBox
from damagepipe.mock_backend import (
    CHAT_MODE_GARBAGE_UNLESS_REPAIRED,
    MockBackend,
    MockTransport,
)
from damagepipe.util import read_json

from support import build_mock_run

EP = BackendEndpoint(base_url="mock://local", model_name="vlm", timeout_s=5.0, max_retries=1)

VALID_REPLY = json.dumps(
    {
        "category": 3,
        "reasoning": "Partial roof loss with cracked walls.",
        "hazards": ["falling debris"],
        "characteristics": ["missing roof sections"],
        "recommendations": ["restrict access"],
    }
)


class TestExtractFirstJsonObject:
    def test_bare_object(self):
        assert extract_first_json_object('{"a": 1}') == {"a": 1}

    def test_fenced_block_with_prose(self):
        text = 'Sure! Here is the result:\n```json\n{"category": 2}\n```\nHope that helps.'
        assert extract_first_json_object(text) == {"category": 2}

    def test_nested_braces(self):
        text = 'prefix {"outer": {"inner": [1, 2]}} suffix'
        assert extract_first_json_object(text) == {"outer": {"inner": [1, 2]}}

    def test_first_of_multiple_objects_wins(self):
        assert extract_first_json_object('{"first": 1} {"second": 2}') == {"first": 1}

    def test_unbalanced_prefix_skipped(self):
        assert extract_first_json_object('{broken {"ok": true}') == {"ok": True}

    def test_no_object_raises(self):
        with pytest.raises(AssessmentParseError):
            extract_first_json_object("no json here, just [1, 2, 3]")


class TestParseAssessment:
    def test_valid_reply(self):
        parsed = parse_assessment(VALID_REPLY, "vlm-a")
        assert parsed.category == 3
        assert parsed.category.label == "Severe Damage"
        assert parsed.hazards == ("falling debris",)
        assert parsed.raw_response == VALID_REPLY
        assert parsed.candidate_model == "vlm-a"

    def test_category_as_integral_float(self):
        parsed = parse_assessment('{"category": 3.0, "reasoning": "r"}', "m")
        assert parsed.category == 3

    def test_category_as_digit_string(self):
        parsed = parse_assessment('{"category": "2", "reasoning": "r"}', "m")
        assert parsed.category == 2

    def test_list_fields_default_empty(self):
        parsed = parse_assessment('{"category": 1}', "m")
        assert parsed.hazards == ()
        assert parsed.characteristics == ()
        assert parsed.recommendations == ()
        assert parsed.reasoning == ""

    @pytest.mark.parametrize(
        "reply",
        [
            '{"category": 5}',
            '{"category": 0}',
            '{"category": true}',
            '{"category": 2.5}',
            '{"category": "two"}',
            '{"reasoning": "no category"}',
            "not json at all",
        ],
    )
    def test_bad_category_raises(self, reply):
        with pytest.raises(AssessmentParseError):
            parse_assessment(reply, "m")

    def test_non_list_hazards_raise(self):
        with pytest.raises(AssessmentParseError):
            parse_assessment('{"category": 2, "hazards": "fire"}', "m")


class TestCaptionAndSummary:
    RECORD = {
        "category": 4,
        "reasoning": "Total collapse of the structure.",
        "hazards": ["unstable rubble"],
        "characteristics": ["pancaked floors"],
        "recommendations": ["mark for demolition"],
    }

    def test_caption_contents(self):
        caption = assessment_caption(self.RECORD)
        assert caption.startswith("Totally Destroyed")
        assert "Total collapse of the structure." in caption
        assert "unstable rubble" in caption
        assert "mark for demolition" in caption
        assert "pancaked floors" not in caption  # characteristics stay out of the caption

    def test_summary_lists_every_field(self):
        summary = assessment_summary_text(self.RECORD)
        assert "Damage category: (4) Totally Destroyed" in summary
        assert "Reasoning: Total collapse of the structure." in summary
        assert "Hazards: unstable rubble" in summary
        assert "Characteristics: pancaked floors" in summary
        assert "Recommendations: mark for demolition" in summary

    def test_summary_marks_empty_lists(self):
        summary = assessment_summary_text({"category": 1, "reasoning": "ok"})
        assert "Hazards: none listed" in summary


class TestCropPair:
    def _images(self, size=32):
        rng = np.random.default_rng(0)
        return (
            rng.integers(0, 255, (size, size, 3), dtype=np.uint8),
            rng.integers(0, 255, (size, size, 3), dtype=np.uint8),
        )

    def test_snap_to_pixel_grid(self):
        pre, post = self._images()
        crop = crop_pair(pre, post, BBox(10.2, 10.2, 20.8, 20.8))
        assert crop.pre_patch.shape == (11, 11, 3)
        np.testing.assert_array_equal(crop.pre_patch, pre[10:21, 10:21])
        np.testing.assert_array_equal(crop.post_patch, post[10:21, 10:21])

    def test_integer_box_is_exact(self):
        pre, post = self._images()
        crop = crop_pair(pre, post, BBox(4, 6, 12, 14))
        assert crop.pre_patch.shape == (8, 8, 3)

    def test_box_outside_image_raises(self):
        pre, post = self._images(16)
        with pytest.raises(ValueError):
            crop_pair(pre, post, BBox(10, 10, 20, 20))

    def test_mismatched_images_raise(self):
        pre, _ = self._images(32)
        _, post = self._images(16)
        with pytest.raises(ValueError):
            crop_pair(pre, post[:16, :16], BBox(1, 1, 5, 5))


class TestQueryWithRepair:
    def _gateway(self, chat_mode: str):
        backend = MockBackend(seed=0, chat_mode=chat_mode)
        return Gateway(MockTransport(backend), backoff_s=0.0), backend

    def test_clean_reply_needs_no_repair(self):
        gateway, backend = self._gateway("normal")
        request = ChatRequest(model_name="vlm", prompt="Assess the damage.")
        parsed, raw, repair_used, error = query_with_repair(
            gateway, EP, request, lambda text: parse_assessment(text, "vlm")
        )
        assert parsed is not None and error is None
        assert repair_used is False
        assert backend.calls["/api/chat"] == 1
        assert parsed.raw_response == raw

    def test_garbage_then_repair_succeeds(self):
        gateway, backend = self._gateway(CHAT_MODE_GARBAGE_UNLESS_REPAIRED)
        request = ChatRequest(model_name="vlm", prompt="Assess the damage.")
        parsed, _, repair_used, error = query_with_repair(
            gateway, EP, request, lambda text: parse_assessment(text, "vlm")
        )
        assert parsed is not None and error is None
        assert repair_used is True
        assert backend.calls["/api/chat"] == 2

    def test_unparseable_after_repair_reports_failure(self):
        gateway, _ = self._gateway("normal")

        def always_fail(text: str):
            raise AssessmentParseError("nope")

        request = ChatRequest(model_name="vlm", prompt="Assess.")
        parsed, raw, repair_used, error = query_with_repair(gateway, EP, request, always_fail)
        assert parsed is None
        assert repair_used is True
        assert "nope" in error
        assert raw  # final raw text is preserved for the failure record


class TestRunEvent:
    def test_run_layout_and_manifest(self, mock_run):
        run_dir = mock_run.run_dir
        assert sorted(p.name for p in (run_dir / "detections").iterdir()) == [
            f"{pair.pair_id}.json" for pair in sorted(mock_run.pairs, key=lambda p: p.pair_id)
        ]
        for candidate in mock_run.candidates:
            manifest = mock_run.manifests[candidate]
            counts = manifest.counts
            assert counts["pairs"] == len(mock_run.pairs)
            assert counts["detections"] == counts["crops"]
            assert counts["assessments"] + counts["failures"] == counts["crops"]
            assert counts["assessments"] > 0
            files = list(iter_assessment_files(run_dir, candidate))
            assert len(files) == counts["crops"]
            for pair_id, index, path in files:
                record = read_assessment(path)
                assert record["pair_id"] == pair_id
                assert record["building_index"] == index
                assert not record["failed"]
                assert record["category"] in (1, 2, 3, 4)
                raw = run_dir / "raw" / path.parent.parent.name / pair_id / f"{index}.txt"
                assert raw.exists()
                for phase in ("pre", "post"):
                    assert (run_dir / "crops" / pair_id / f"{index}_{phase}.png").exists()

    def test_detection_files_record_scale(self, mock_run):
        for pair in mock_run.pairs:
            stored = read_json(mock_run.run_dir / "detections" / f"{pair.pair_id}.json")
            assert stored["scale_factor"] == 4
            assert stored["image_dims"] == [pair.dims.width * 4, pair.dims.height * 4]
            confidences = [d["confidence"] for d in stored["detections"]]
            assert confidences == sorted(confidences, reverse=True)
            for entry in stored["detections"]:
                x0, y0, x1, y1 = entry["box"]
                assert 0 <= x0 < x1 <= stored["image_dims"][0]
                assert 0 <= y0 < y1 <= stored["image_dims"][1]

    def test_rerun_makes_zero_backend_calls(self, mock_run):
        before = mock_run.backend.calls
        manifest = run_event(
            mock_run.options, mock_run.pairs, mock_run.gateway, mock_run.candidates[0]
        )
        assert mock_run.backend.calls == before
        assert manifest.backend_calls == {}
        assert manifest.counts == mock_run.manifests[mock_run.candidates[0]].counts

    def test_super_resolution_ablation_scales_coordinates(self, tmp_path, mock_run):
        ablation = build_mock_run(tmp_path)
        candidate = ablation.candidates[0]
        options = replace(
            ablation.options, run_dir=tmp_path / "run-no-sr", sr_enabled=False
        )
        run_event(options, ablation.pairs, ablation.gateway, candidate)

        sr_files = {
            (pair_id, index): path
            for pair_id, index, path in iter_assessment_files(ablation.run_dir, candidate)
        }
        flat_files = {
            (pair_id, index): path
            for pair_id, index, path in iter_assessment_files(options.run_dir, candidate)
        }
        assert sr_files.keys() == flat_files.keys() and sr_files
        for key, sr_path in sr_files.items():
            sr_box = read_assessment(sr_path)["padded_box"]
            flat_box = read_assessment(flat_files[key])["padded_box"]
            assert [c / 4 for c in sr_box] == flat_box
        for pair in ablation.pairs:
            stored = read_json(options.run_dir / "detections" / f"{pair.pair_id}.json")
            assert stored["scale_factor"] == 1
            assert stored["image_dims"] == [pair.dims.width, pair.dims.height]

    def test_failed_assessments_are_recorded_not_raised(self, tmp_path):
        backend = MockBackend(seed=3, chat_mode=CHAT_MODE_GARBAGE_UNLESS_REPAIRED)
        gateway = Gateway(MockTransport(backend), backoff_s=0.0)
        run = build_mock_run(tmp_path, n_pairs=1, buildings_per_pair=1)
        options = replace(run.options, run_dir=tmp_path / "run-repair")
        manifest = run_event(options, run.pairs, gateway, "vlm-x")
        counts = manifest.counts
        assert counts["assessments"] == counts["crops"]  # repair rescued every reply
        assert counts["repair_retries"] == counts["crops"]
        for _, _, path in iter_assessment_files(options.run_dir, "vlm-x"):
            assert read_assessment(path)["repair_used"] is True
