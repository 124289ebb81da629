import json
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from sgqa.data import (ClozeExample, SyntheticClozeConfig, SyntheticSpanConfig, align_answer, find_positions,
                       gen_synthetic_cloze, gen_synthetic_span, load_cloze_dataset, load_span_dataset,
                       parse_squad, span_vocabulary, write_cloze_dataset, write_span_dataset)
from sgqa.errors import ContractError, ParameterError, ParseError, SchemaError
from sgqa.metrics import normalize_answer
from sgqa.text import Passage, Question


def squad(context, question, answer, start):
    return {"data": [{"title": "t", "paragraphs": [
        {"context": context, "qas": [{"id": "q1", "question": question,
                                      "answers": [{"text": answer, "answer_start": start}]}]}]}]}


class TestSquadLoader:
    def test_crafted_paragraph(self, tmp_path):
        ctx = "The big black cat sat ."
        path = tmp_path / "s.json"
        path.write_text(json.dumps(squad(ctx, "Who sat?", "cat", ctx.index("cat"))))
        data = load_span_dataset(path)
        assert len(data) == 1
        ex = data[0]
        assert (ex.answer_start, ex.answer_end) == (3, 3)
        assert data.report.total == 1 and data.report.accepted == 1

    def test_unalignable_answer_is_counted(self):
        ctx = "The cat sat on the mat."
        data = parse_squad(squad(ctx, "What?", "at", ctx.index("cat") + 1))
        assert len(data) == 0
        assert data.report.rejected == 1 and data.report.reasons["unaligned answer"] == 1

    def test_malformed_json_reports_location(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"data": [\n  {"title": }\n]}')
        with pytest.raises(ParseError) as info:
            load_span_dataset(path)
        assert info.value.line == 2

    def test_missing_field(self):
        with pytest.raises(SchemaError, match="context"):
            parse_squad({"data": [{"paragraphs": [{"qas": []}]}]})

    def test_alignment_detokenizes_to_gold(self):
        examples = gen_synthetic_span(SyntheticSpanConfig(n_examples=30, seed=3))
        data = parse_squad(json.loads(json.dumps(_squad_of(examples))))
        assert len(data) == 30
        for ex in data:
            span = ex.span_text(ex.answer_start, ex.answer_end)
            assert normalize_answer(span) == normalize_answer(ex.answer_text)

    def test_write_and_reload_keeps_spans(self, tmp_path):
        examples = gen_synthetic_span(SyntheticSpanConfig(n_examples=20, seed=5))
        write_span_dataset(examples, tmp_path / "s.json")
        back = load_span_dataset(tmp_path / "s.json")
        assert [(e.answer_start, e.answer_end) for e in back] == [(e.answer_start, e.answer_end) for e in examples]
        assert [e.passage.flat_tokens for e in back] == [e.passage.flat_tokens for e in examples]

    def test_align_answer_requires_offsets(self):
        assert align_answer(Passage([["a", "."]]), "a", 0) is None


def _squad_of(examples):
    from sgqa.data import span_examples_to_squad
    return span_examples_to_squad(examples)


class TestClozeLoader:
    def test_answer_index(self, tmp_path):
        path = tmp_path / "c.tsv"
        path.write_text("A met B . C left .\t@placeholder met B\tA|B|C\tB\n")
        (ex,) = load_cloze_dataset(path)
        assert ex.answer_index == 1
        assert ex.candidate_positions == [[0], [2], [4]]

    def test_bad_records_are_rejected(self, tmp_path):
        path = tmp_path / "c.tsv"
        path.write_text("A met B .\t@placeholder met\tA|B\tZ\n"
                        "A met B .\tno placeholder\tA|B\tA\n"
                        "too\tfew\tfields\n"
                        "A met B .\t@placeholder met\tA|B\tA\n")
        data = load_cloze_dataset(path)
        assert len(data) == 1 and data[0].id == "line-4"
        assert data.report.rejected == 3 and data.report.total == 4

    def test_conservation_on_1000_records(self, tmp_path):
        examples = gen_synthetic_cloze(SyntheticClozeConfig(n_examples=1000, seed=2))
        path = tmp_path / "c.tsv"
        write_cloze_dataset(examples, path)
        lines = path.read_text().splitlines()
        for k in range(0, 1000, 7):
            fields = lines[k].split("\t")
            lines[k] = "\t".join(fields[:3] + ["nobody"])
        path.write_text("\n".join(lines) + "\n")
        data = load_cloze_dataset(path)
        assert data.report.accepted + data.report.rejected == 1000
        assert data.report.rejected == len(range(0, 1000, 7))

    def test_candidate_must_occur(self):
        with pytest.raises(ContractError):
            ClozeExample("x", Passage([["a", "."]]), Question(["@placeholder"]), ["a", "b"], 0)

    def test_find_positions_multiword(self):
        assert find_positions(["new", "york", "is", "new", "york"], "new york") == [0, 1, 3, 4]
        assert find_positions(["a"], "") == []


class TestSyntheticSpan:
    def test_determinism(self):
        a = gen_synthetic_span(SyntheticSpanConfig(n_examples=20, seed=7))
        b = gen_synthetic_span(SyntheticSpanConfig(n_examples=20, seed=7))
        assert [(e.passage.flat_tokens, e.question.tokens, e.answer_start, e.answer_end) for e in a] == \
               [(e.passage.flat_tokens, e.question.tokens, e.answer_start, e.answer_end) for e in b]

    def test_answer_inside_one_sentence_after_key(self):
        for ex in gen_synthetic_span(SyntheticSpanConfig(n_examples=200, seed=1, key_len=2, n_markers=6)):
            sents = ex.passage.sent_of_word
            assert sents[ex.answer_start][0] == sents[ex.answer_end][0]
            key = ex.question.tokens[2:-1]
            toks = ex.passage.flat_tokens
            assert toks[ex.answer_start - len(key):ex.answer_start] == key
            assert toks[ex.answer_end + 1] == "."
            assert 1 <= ex.answer_end - ex.answer_start + 1 <= 3

    def test_vocabulary_size(self):
        examples = gen_synthetic_span(SyntheticSpanConfig(n_examples=300, vocab_size=60, seed=2))
        used = {t for e in examples for t in e.passage.flat_tokens + e.question.tokens}
        content, markers = span_vocabulary(60)
        assert used <= set(content) | set(markers) | {".", "what", "follows", "?"}
        assert len(content) + len(markers) + 4 == 60

    def test_answer_sentence_uniform(self):
        examples = gen_synthetic_span(SyntheticSpanConfig(n_examples=10_000, seed=11))
        counts = Counter(e.passage.sent_of_word[e.answer_start][0] for e in examples)
        observed = [counts[i] for i in range(4)]
        assert stats.chisquare(observed).pvalue > 0.01

    @pytest.mark.parametrize("kwargs", [dict(vocab_size=10), dict(sent_len_range=(3, 5), max_answer_len=3),
                                        dict(n_sentences=1, n_decoys=1), dict(n_markers=1)])
    def test_infeasible_configs(self, kwargs):
        with pytest.raises(ParameterError):
            gen_synthetic_span(SyntheticSpanConfig(n_examples=1, **kwargs))


class TestSyntheticCloze:
    def test_determinism(self):
        a = gen_synthetic_cloze(SyntheticClozeConfig(n_examples=10, seed=4))
        b = gen_synthetic_cloze(SyntheticClozeConfig(n_examples=10, seed=4))
        assert [(e.passage.flat_tokens, e.candidates, e.answer_index) for e in a] == \
               [(e.passage.flat_tokens, e.candidates, e.answer_index) for e in b]

    def test_answer_occurs_and_is_unique(self):
        for ex in gen_synthetic_cloze(SyntheticClozeConfig(n_examples=200, seed=5)):
            assert ex.answer in ex.passage.flat_tokens
            assert len(set(ex.candidates)) == len(ex.candidates) == 4
            rel = ex.question.tokens[1]
            j = ex.passage.flat_tokens.index(rel)
            assert ex.passage.flat_tokens[j - 1] == ex.answer

    def test_majority_baseline_near_chance(self):
        examples = gen_synthetic_cloze(SyntheticClozeConfig(n_examples=2000, seed=6))
        counts = Counter(e.answer_index for e in examples)
        assert abs(max(counts.values()) / len(examples) - 0.25) < 0.05
