"""QA example types, file readers/writers and synthetic task generators."""

from __future__ import annotations

import itertools

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, ParameterError, ParseError, SchemaError
from .metrics import normalize_answer
from .text import PLACEHOLDER, Passage, Question, tokenize

logger = logging.getLogger(__name__)


@dataclass
class SpanExample:
    id: str
    passage: Passage
    question: Question
    answer_start: int
    answer_end: int
    answer_text: str
    golds: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.answer_start <= self.answer_end < len(self.passage):
            raise ContractError(
                f"{self.id}: answer span [{self.answer_start}, {self.answer_end}] outside passage of {len(self.passage)}")
        if not self.golds:
            self.golds = [self.answer_text]

    def span_text(self, start: int, end: int) -> str:
        return " ".join(self.passage.flat_tokens[start:end + 1])


@dataclass
class ClozeExample:
    id: str
    passage: Passage
    question: Question
    candidates: list[str]
    answer_index: int
    candidate_positions: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if self.question.tokens.count(PLACEHOLDER) != 1:
            raise ContractError(f"{self.id}: question must hold exactly one {PLACEHOLDER}")
        if not 0 <= self.answer_index < len(self.candidates):
            raise ContractError(f"{self.id}: answer index {self.answer_index} out of range")
        if not self.candidate_positions:
            self.candidate_positions = [find_positions(self.passage.flat_tokens, c) for c in self.candidates]
        for cand, pos in zip(self.candidates, self.candidate_positions):
            if not pos:
                raise ContractError(f"{self.id}: candidate {cand!r} does not occur in the passage")

    @property
    def answer(self) -> str:
        return self.candidates[self.answer_index]


QaExample = Union[SpanExample, ClozeExample]


def find_positions(flat_tokens: Sequence[str], phrase: str) -> list[int]:
    """Every flat position covered by an occurrence of ``phrase``."""
    needle = [t.text for t in tokenize(phrase)]
    if not needle:
        return []
    k = len(needle)
    out: list[int] = []
    for i in range(len(flat_tokens) - k + 1):
        if list(flat_tokens[i:i + k]) == needle:
            out.extend(p for p in range(i, i + k) if not out or p > out[-1])
    return out


@dataclass
class LoadReport:
    total: int = 0
    accepted: int = 0
    rejected: int = 0
    reasons: Counter = field(default_factory=Counter)

    def reject(self, reason: str) -> None:
        self.rejected += 1
        self.reasons[reason] += 1

    @property
    def alignment_rate(self) -> float:
        return self.accepted / self.total if self.total else 0.0


class LoadedDataset(list):
    """A list of examples that also carries the loader's report."""

    def __init__(self, items: Iterable = (), report: Optional[LoadReport] = None):
        super().__init__(items)
        self.report = report or LoadReport()


# ---------------------------------------------------------------------------
# SQuAD
# ---------------------------------------------------------------------------


def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"missing field {key!r} in {where}")
    return obj[key]


def align_answer(passage: Passage, answer_text: str, char_start: int) -> Optional[tuple[int, int]]:
    """Token interval covering ``answer_text`` at ``char_start``, or None."""
    if passage.offsets is None:
        return None
    char_end = char_start + len(answer_text)
    hit = [k for k, (s, e) in enumerate(passage.offsets) if e > char_start and s < char_end]
    if not hit:
        return None
    start, end = hit[0], hit[-1]
    span = " ".join(passage.flat_tokens[start:end + 1])
    if normalize_answer(span) != normalize_answer(answer_text):
        return None
    return start, end


def parse_squad(obj, source: str = "<squad>") -> LoadedDataset:
    report = LoadReport()
    examples = []
    for a_idx, article in enumerate(_require(obj, "data", source)):
        for p_idx, para in enumerate(_require(article, "paragraphs", f"data[{a_idx}]")):
            where = f"data[{a_idx}].paragraphs[{p_idx}]"
            context = _require(para, "context", where)
            qas = _require(para, "qas", where)
            tokens = tokenize(context)
            passage = Passage.from_tokens(tokens, text=context) if tokens else None
            for q_idx, qa in enumerate(qas):
                qwhere = f"{where}.qas[{q_idx}]"
                qtext = _require(qa, "question", qwhere)
                answers = _require(qa, "answers", qwhere)
                qid = str(qa.get("id", f"{a_idx}-{p_idx}-{q_idx}"))
                report.total += 1
                if not answers:
                    report.reject("no answer")
                    continue
                first = answers[0]
                text = _require(first, "text", f"{qwhere}.answers[0]")
                start_char = _require(first, "answer_start", f"{qwhere}.answers[0]")
                question = Question.from_text(qtext) if tokenize(qtext) else None
                if passage is None or question is None:
                    report.reject("empty passage or question")
                    continue
                span = align_answer(passage, text, int(start_char))
                if span is None:
                    report.reject("unaligned answer")
                    continue
                golds = [_require(a, "text", qwhere) for a in answers]
                examples.append(SpanExample(qid, passage, question, span[0], span[1], text, golds))
                report.accepted += 1
    return LoadedDataset(examples, report)


def load_span_dataset(path) -> LoadedDataset:
    """Read a SQuAD v1.1 JSON file; unalignable answers are dropped and counted."""
    path = Path(path)
    raw = path.read_text(encoding="utf-8")
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg}) at column {exc.colno}", path=path, line=exc.lineno) from exc
    data = parse_squad(obj, source=str(path))
    logger.info("loaded %s: %d/%d examples aligned", path, data.report.accepted, data.report.total)
    return data


def span_examples_to_squad(examples: Sequence[SpanExample]) -> dict:
    """Serialize span examples in the SQuAD v1.1 layout, one paragraph per example."""
    paragraphs = []
    for ex in examples:
        text = ex.passage.text or " ".join(ex.passage.flat_tokens)
        passage = ex.passage if ex.passage.offsets is not None else Passage.from_text(text)
        start_char = passage.offsets[ex.answer_start][0]
        paragraphs.append({
            "context": text,
            "qas": [{"id": ex.id, "question": " ".join(ex.question.tokens),
                     "answers": [{"text": ex.answer_text, "answer_start": start_char}]}],
        })
    return {"version": "1.1", "data": [{"title": "synthetic", "paragraphs": paragraphs}]}


# ---------------------------------------------------------------------------
# cloze
# ---------------------------------------------------------------------------


def parse_cloze_line(line: str, rec_id: str) -> ClozeExample:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != 4:
        raise ContractError(f"expected 4 tab-separated fields, got {len(fields)}")
    passage_text, question_text, cand_field, answer = fields
    candidates = [c.strip() for c in cand_field.split("|") if c.strip()]
    question = Question.from_text(question_text)
    if question.tokens.count(PLACEHOLDER) != 1:
        raise ContractError("question must contain exactly one placeholder")
    answer = answer.strip()
    if answer not in candidates:
        raise ContractError("answer is not among the candidates")
    passage = Passage.from_text(passage_text)
    return ClozeExample(rec_id, passage, question, candidates, candidates.index(answer))


def load_cloze_dataset(path) -> LoadedDataset:
    """Read tab-separated cloze records; bad records are skipped and counted."""
    report = LoadReport()
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            report.total += 1
            try:
                examples.append(parse_cloze_line(line, f"line-{lineno}"))
            except ContractError as exc:
                report.reject(str(exc).split(": ", 1)[-1])
                continue
            report.accepted += 1
    return LoadedDataset(examples, report)


def cloze_example_to_line(ex: ClozeExample) -> str:
    text = ex.passage.text or " ".join(ex.passage.flat_tokens)
    return "\t".join([text, " ".join(ex.question.tokens), "|".join(ex.candidates), ex.answer]) + "\n"


def write_cloze_dataset(examples: Sequence[ClozeExample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(cloze_example_to_line(ex))


def write_span_dataset(examples: Sequence[SpanExample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(span_examples_to_squad(examples), fh, indent=None, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------

SPAN_FIXED = (".", "what", "follows", "?")


@dataclass
class SyntheticSpanConfig:
    n_examples: int = 200
    vocab_size: int = 100
    n_sentences: int = 4
    sent_len_range: tuple[int, int] = (6, 9)
    seed: int = 7
    n_decoys: int = 1
    max_answer_len: int = 3
    key_len: int = 1
    n_markers: int = 5


def span_vocabulary(vocab_size: int, n_markers: Optional[int] = 5) -> tuple[list[str], list[str]]:
    """Split ``vocab_size`` token types into (content words, marker words)."""
    if vocab_size < 20:
        raise ParameterError(f"vocab_size must be at least 20, got {vocab_size}")
    if n_markers is None:
        n_markers = max(4, vocab_size // 5)
    if not 2 <= n_markers <= vocab_size - len(SPAN_FIXED) - 8:
        raise ParameterError(f"n_markers={n_markers} leaves too few content words in a vocabulary of {vocab_size}")
    n_content = vocab_size - len(SPAN_FIXED) - n_markers
    return [f"w{k}" for k in range(n_content)], [f"m{k}" for k in range(n_markers)]


def gen_synthetic_span(config: SyntheticSpanConfig) -> list[SpanExample]:
    """Marker-key span task.

    Each passage is sentences of random content words ending in ``.``. One
    sentence carries a key of ``key_len`` marker words followed by a 1-3 word
    answer that runs to the end of the sentence; ``n_decoys`` other sentences
    carry different keys in the same pattern. The question is
    ``what follows <key> ?``.
    """
    lo, hi = config.sent_len_range
    if lo > hi or lo < 1:
        raise ParameterError(f"bad sentence length range {config.sent_len_range}")
    if not 1 <= config.max_answer_len:
        raise ParameterError("max_answer_len must be positive")
    if config.key_len < 1:
        raise ParameterError("key_len must be positive")
    if lo < config.key_len + config.max_answer_len:
        raise ParameterError(
            f"answer span of up to {config.max_answer_len} plus a key exceeds sentence length {lo}")
    if config.n_sentences < 1 or not 0 <= config.n_decoys < config.n_sentences:
        raise ParameterError("need n_sentences >= 1 and 0 <= n_decoys < n_sentences")
    content, markers = span_vocabulary(config.vocab_size, config.n_markers)
    rng = np.random.default_rng(config.seed)
    keys = list(itertools.permutations(markers, config.key_len))
    if len(keys) < config.n_decoys + 1:
        raise ParameterError("not enough marker keys for the requested decoys")

    examples = []
    for n in range(config.n_examples):
        picks = rng.choice(len(keys), size=config.n_decoys + 1, replace=False)
        planted = rng.choice(config.n_sentences, size=config.n_decoys + 1, replace=False)
        target_sentence = int(planted[0])
        sentences = []
        answer = None
        for i in range(config.n_sentences):
            length = int(rng.integers(lo, hi + 1))
            if i in planted:
                k = int(np.flatnonzero(planted == i)[0])
                key = list(keys[int(picks[k])])
                alen = int(rng.integers(1, config.max_answer_len + 1))
                prefix = [content[c] for c in rng.integers(0, len(content), size=length - len(key) - alen)]
                tail = [content[c] for c in rng.integers(0, len(content), size=alen)]
                sent = prefix + key + tail
                if i == target_sentence:
                    answer = (i, len(prefix) + len(key), len(sent) - 1, tail, key)
            else:
                sent = [content[c] for c in rng.integers(0, len(content), size=length)]
            sentences.append(sent + ["."])
        i, j0, j1, tail, key = answer
        text = " ".join(w for s in sentences for w in s)
        passage = Passage.from_text(text)
        start = passage.flat_index(i, j0)
        end = passage.flat_index(i, j1)
        question = Question(["what", "follows"] + key + ["?"])
        examples.append(SpanExample(f"span-{config.seed}-{n}", passage, question, start, end, " ".join(tail)))
    return examples


@dataclass
class SyntheticClozeConfig:
    n_examples: int = 300
    n_candidates: int = 4
    n_entities: int = 20
    n_relations: int = 12
    n_filler_words: int = 40
    n_filler_sentences: int = 1
    sent_len_range: tuple[int, int] = (4, 7)
    seed: int = 7


def gen_synthetic_cloze(config: SyntheticClozeConfig) -> list[ClozeExample]:
    """Entity-relation cloze task.

    A passage names ``n_candidates`` distinct entities, each followed by a
    distinct relation word inside its own sentence, plus filler sentences.
    The question ``@placeholder r ?`` asks for the entity bound to relation
    ``r``. Candidates are the passage's entities in random order.
    """
    k = config.n_candidates
    lo, hi = config.sent_len_range
    if k < 1 or k > config.n_entities or k > config.n_relations:
        raise ParameterError("n_candidates exceeds the entity or relation inventory")
    if lo < 2 or lo > hi:
        raise ParameterError(f"sentences must fit an entity and a relation, got {config.sent_len_range}")
    if config.n_filler_words < 1:
        raise ParameterError("need at least one filler word")
    rng = np.random.default_rng(config.seed)
    entities = [f"E{e}" for e in range(config.n_entities)]
    relations = [f"r{r}" for r in range(config.n_relations)]
    fillers = [f"f{w}" for w in range(config.n_filler_words)]

    examples = []
    for n in range(config.n_examples):
        ents = [entities[e] for e in rng.choice(config.n_entities, size=k, replace=False)]
        rels = [relations[r] for r in rng.choice(config.n_relations, size=k, replace=False)]
        sentences = []
        for ent, rel in zip(ents, rels):
            length = int(rng.integers(lo, hi + 1))
            pos = int(rng.integers(0, length - 1))
            words = [fillers[w] for w in rng.integers(0, len(fillers), size=length - 2)]
            sentences.append(words[:pos] + [ent, rel] + words[pos:] + ["."])
        for _ in range(config.n_filler_sentences):
            length = int(rng.integers(lo, hi + 1))
            sentences.append([fillers[w] for w in rng.integers(0, len(fillers), size=length)] + ["."])
        order = rng.permutation(len(sentences))
        text = " ".join(w for s in order for w in sentences[s])
        target = int(rng.integers(0, k))
        cand_order = rng.permutation(k)
        candidates = [ents[c] for c in cand_order]
        answer_index = int(np.flatnonzero(cand_order == target)[0])
        question = Question([PLACEHOLDER, rels[target], "?"])
        examples.append(ClozeExample(f"cloze-{config.seed}-{n}", Passage.from_text(text), question,
                                     candidates, answer_index))
    return examples
