import json

import numpy as np
import pytest

from pitvqa.data import (
    CATEGORIES,
    PAD,
    TAXONOMY,
    UNK,
    FrameState,
    ManifestError,
    build_taxonomy,
    build_vocab,
    detokenize,
    generate_corpus,
    generate_qa,
    read_dataset,
    render_frame,
    sample_procedure,
    split_by_procedure,
    tokenize,
    write_dataset,
)
from pitvqa.data.corpus import MANIFEST, decode_frame, encode_frame
from pitvqa.data.questions import TEMPLATES, all_template_questions, word_count
from pitvqa.data.render import GLYPH, PHASE_COLOURS, SLOT_ORIGINS, draw_clean
from pitvqa.data.vocab import normalize
from pitvqa.rng import stream


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(3, 4, 30)


class TestTaxonomy:
    def test_sizes(self):
        assert TAXONOMY.sizes == (4, 15, 18, 3, 5, 14)
        assert TAXONOMY.n_classes == 59

    def test_bijection(self):
        names = [TAXONOMY.class_name(i) for i in range(59)]
        assert len(set(names)) == 59
        for i in range(59):
            cat, local = TAXONOMY.class_of(i)
            assert TAXONOMY.class_index(cat, local) == i

    def test_contiguous_ranges(self):
        ranges = [TAXONOMY.category_range(c) for c in CATEGORIES]
        assert [r.start for r in ranges] == [0, 4, 19, 37, 40, 45]
        assert ranges[-1].stop == 59

    def test_every_step_has_one_phase(self):
        seen = {s: TAXONOMY.phase_of_step(s) for s in range(15)}
        assert set(seen.values()) == {0, 1, 2, 3}

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            TAXONOMY.class_of(59)
        with pytest.raises(IndexError):
            TAXONOMY.class_index("phase", 4)

    def test_rebuild_equal(self):
        assert build_taxonomy() == TAXONOMY


class TestWorkflow:
    def test_consistency(self):
        for s in sample_procedure(1, 500):
            assert TAXONOMY.phase_of_step(s.step) == s.phase
            assert s.quantity == len(s.instruments) <= 2
            tools = [t for t, _ in s.instruments]
            slots = [p for _, p in s.instruments]
            assert len(set(tools)) == len(tools) and len(set(slots)) == len(slots)

    def test_left_to_right(self):
        order = [s for steps in TAXONOMY.phase_steps for s in steps]
        rank = [order.index(s.step) for s in sample_procedure(2, 300)]
        assert rank == sorted(rank) and rank[0] == 0

    def test_deterministic(self):
        assert sample_procedure(4, 100, 3) == sample_procedure(4, 100, 3)
        assert sample_procedure(4, 100, 3) != sample_procedure(5, 100, 3)

    def test_coverage(self):
        states = sample_procedure(0, 10_000)
        assert {s.phase for s in states} == {0, 1, 2, 3}
        assert len({s.step for s in states}) >= 14

    def test_emission_rates(self):
        states = [s for pid in range(10) for s in sample_procedure(0, 1000, pid)]
        counts = np.bincount([s.quantity for s in states], minlength=3) / len(states)
        np.testing.assert_allclose(counts, [0.25, 0.5, 0.25], atol=0.02)

    def test_bad_length(self):
        with pytest.raises(ValueError):
            sample_procedure(0, 0)


def state(**kw):
    base = dict(procedure_id=0, frame_index=0, phase=0, step=0, instruments=(), note=0)
    base.update(kw)
    return FrameState(**base)


class TestRender:
    def test_range_and_shape(self):
        img = render_frame(state(instruments=((3, 1),)), 0)
        assert img.shape == (3, 64, 64) and img.min() >= 0 and img.max() <= 1

    def test_deterministic(self):
        s = state(instruments=((3, 1), (7, 4)), note=5)
        assert render_frame(s, 9).tobytes() == render_frame(s, 9).tobytes()
        assert render_frame(s, 9).tobytes() != render_frame(s, 10).tobytes()

    def test_phase_hue_distance(self):
        a = render_frame(state(phase=0, step=0), 1)
        b = render_frame(state(phase=1, step=4), 1)
        assert np.linalg.norm(a.mean(axis=(1, 2)) - b.mean(axis=(1, 2))) > 0.1

    def test_empty_slots_are_background(self):
        img = render_frame(state(phase=2, step=8), 4)
        colour = PHASE_COLOURS[2][:, None, None]
        for r, c in SLOT_ORIGINS:
            patch = img[:, r:r + GLYPH, c:c + GLYPH]
            # 6 sigma of the noise, allowing for clipping
            assert np.abs(patch - colour).max() < 0.3

    def test_glyph_encodes_instrument(self):
        a = draw_clean(state(instruments=((0, 2),)))
        b = draw_clean(state(instruments=((1, 2),)))
        r, c = SLOT_ORIGINS[2]
        assert not np.array_equal(a[:, r:r + GLYPH, c:c + GLYPH], b[:, r:r + GLYPH, c:c + GLYPH])

    def test_distinct_codes(self):
        steps = {draw_clean(state(step=s, phase=TAXONOMY.phase_of_step(s))).tobytes() for s in range(15)}
        notes = {draw_clean(state(note=n)).tobytes() for n in range(14)}
        tools = {draw_clean(state(instruments=((t, 0),))).tobytes() for t in range(18)}
        assert (len(steps), len(notes), len(tools)) == (15, 14, 18)

    def test_float32_exact(self):
        img = render_frame(state(), 2)
        assert np.array_equal(img, img.astype(np.float32).astype(np.float64))


class TestQuestions:
    def test_word_counts(self):
        lengths = [word_count(q) for q in all_template_questions()]
        assert min(lengths) >= 7 and max(lengths) <= 12
        assert min(lengths) == 7 and max(lengths) == 12

    def test_consistency(self):
        for s in sample_procedure(5, 200):
            for qa in generate_qa(s, stream(5, "qa", s.frame_index)):
                cat, local = TAXONOMY.class_of(qa.answer_idx)
                assert cat == qa.category
                if cat == "phase":
                    assert local == s.phase
                elif cat == "step":
                    assert local == s.step
                elif cat == "quantity":
                    assert local == s.quantity
                elif cat == "note":
                    assert local == s.note
                elif cat == "instrument":
                    pos = next(p for p, name in enumerate(TAXONOMY.positions) if name in qa.question)
                    assert (local, pos) in s.instruments
                else:
                    text = " " + " ".join(normalize(qa.question)) + " "
                    tool = next(t for t, name in enumerate(TAXONOMY.instruments) if f" {name} " in text)
                    assert (tool, local) in s.instruments

    def test_counts_per_frame(self):
        s0 = state()
        s2 = state(instruments=((1, 0), (2, 3)))
        assert len(generate_qa(s0, stream(0, "q"))) == 6
        assert len(generate_qa(s2, stream(0, "q"))) == 10

    def test_repeated_categories_use_different_wordings(self):
        qas = generate_qa(state(), stream(1, "q"))
        phase = [q.question for q in qas if q.category == "phase"]
        assert len(set(phase)) == 2

    def test_mean_per_frame(self):
        states = [s for pid in range(10) for s in sample_procedure(0, 1000, pid)]
        n = [len(generate_qa(s, stream(0, "qa", s.procedure_id, s.frame_index))) for s in states]
        assert 7.5 <= np.mean(n) <= 8.5

    def test_instrument_names_unambiguous(self):
        # no instrument name is contained in another, so position questions parse
        names = TAXONOMY.instruments
        assert not any(a != b and f" {a} " in f" {b} " for a in names for b in names)

    def test_templates_have_bank(self):
        assert set(TEMPLATES) == set(CATEGORIES)


class TestVocab:
    def test_empty(self):
        v = build_vocab([])
        assert len(v) == 2 and v.tokens == ()

    def test_duplicates(self):
        assert build_vocab(["a b", "a b", "c"]) == build_vocab(["a b", "c"])

    def test_numbering(self):
        v = build_vocab(["Zeta alpha", "beta!"])
        assert [v.index[t] for t in ("alpha", "beta", "zeta")] == [2, 3, 4]
        assert v.token(PAD) != v.token(UNK)
        assert len(v) == 5

    def test_template_bank_size(self):
        questions = all_template_questions()
        distinct = {tok for q in questions for tok in normalize(q)}
        assert len(build_vocab(questions)) == len(distinct) + 2

    def test_hand_tokenization(self):
        v = build_vocab(all_template_questions())
        ids, mask = tokenize("What is the surgical phase of the image?", v, 16)
        assert ids.shape == (16,) and mask.sum() == 8
        assert np.all(ids[8:] == PAD) and np.all(ids[:8] >= 2)
        assert detokenize(ids, v) == "what is the surgical phase of the image"

    def test_unknown_and_empty(self):
        v = build_vocab(["hello world"])
        ids, mask = tokenize("hello there", v, 12)
        assert ids[1] == UNK and mask.sum() == 2
        ids, mask = tokenize("", v, 12)
        assert np.all(ids == PAD) and not mask.any()

    def test_too_long(self):
        with pytest.raises(ValueError):
            tokenize("one two three four", build_vocab([]), 3)

    def test_round_trip_all_templates(self):
        v = build_vocab(all_template_questions())
        for q in all_template_questions():
            ids, _ = tokenize(q, v, 12)
            assert detokenize(ids, v) == " ".join(normalize(q))


class TestCorpusIO:
    def test_round_trip(self, small_corpus, tmp_path):
        write_dataset(tmp_path, small_corpus)
        assert read_dataset(tmp_path) == small_corpus

    def test_regeneration_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        write_dataset(a, generate_corpus(8, 2, 10))
        write_dataset(b, generate_corpus(8, 2, 10))
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert all((a / f).read_bytes() == (b / f).read_bytes() for f in files)

    def test_frame_header(self):
        raw = encode_frame(np.zeros((3, 64, 64)))
        assert raw[:4] == b"PVQF" and len(raw) == 8 + 3 * 64 * 64 * 4

    def test_truncated_frame(self, small_corpus, tmp_path):
        write_dataset(tmp_path, small_corpus)
        victim = tmp_path / small_corpus.samples[0].frame_path
        victim.write_bytes(victim.read_bytes()[:100])
        with pytest.raises(OSError, match=victim.name):
            read_dataset(tmp_path)

    def test_missing_frame(self, small_corpus, tmp_path):
        write_dataset(tmp_path, small_corpus)
        (tmp_path / small_corpus.samples[-1].frame_path).unlink()
        with pytest.raises(OSError):
            read_dataset(tmp_path)

    def test_bad_magic(self):
        with pytest.raises(OSError):
            decode_frame(b"XXXX" + bytes(8), "f.bin")

    @pytest.mark.parametrize(
        "edit, message",
        [
            (lambda r: r.update(category="tool"), "unknown category"),
            (lambda r: r.update(answer_idx=58), "answer_idx"),
            (lambda r: r.update(split="test"), "split"),
            (lambda r: r.pop("question"), "fields"),
        ],
    )
    def test_manifest_validation(self, small_corpus, tmp_path, edit, message):
        write_dataset(tmp_path, small_corpus)
        lines = (tmp_path / MANIFEST).read_text().splitlines()
        rec = json.loads(lines[2])
        edit(rec)
        lines[2] = json.dumps(rec)
        (tmp_path / MANIFEST).write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestError, match=f"line 3: .*{message}"):
            read_dataset(tmp_path)

    def test_invalid_json_line(self, small_corpus, tmp_path):
        write_dataset(tmp_path, small_corpus)
        with open(tmp_path / MANIFEST, "a") as fh:
            fh.write("{not json\n")
        with pytest.raises(ManifestError, match="line"):
            read_dataset(tmp_path)


class TestSplit:
    def test_twenty_five(self):
        c = generate_corpus(1, 25, 2)
        tr, va = split_by_procedure(c, 0.8, 1)
        assert (len(tr.procedures), len(va.procedures)) == (20, 5)
        assert not set(tr.procedures) & set(va.procedures)
        assert {s.split for s in tr.samples} == {"train"} and {s.split for s in va.samples} == {"val"}
        assert not {s.frame_path for s in tr.samples} & {s.frame_path for s in va.samples}

    def test_deterministic(self, small_corpus):
        a = split_by_procedure(small_corpus, 0.5, 2)
        b = split_by_procedure(small_corpus, 0.5, 2)
        assert a[0].procedures == b[0].procedures

    def test_too_few(self):
        with pytest.raises(ValueError):
            split_by_procedure(generate_corpus(0, 1, 3), 0.8, 0)


def test_phase_learnable_by_mean_colour():
    """Nearest-centroid on mean RGB recovers phase from pixels."""
    c = generate_corpus(12, 6, 60)
    x = np.array([c.images[f"frames/p{s.procedure_id:03d}_f{s.frame_index:05d}.bin"].mean(axis=(1, 2)) for s in c.frames])
    y = np.array([s.phase for s in c.frames])
    train = np.array([s.procedure_id < 4 for s in c.frames])
    centroids = np.stack([x[train & (y == k)].mean(0) for k in range(4)])
    pred = np.argmin(((x[~train, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    assert (pred == y[~train]).mean() >= 0.9
