"""Grammar rendering, tokenizer round-trips, and evaluation splits."""

import numpy as np
import pytest

from langfold import lang as L


def all_instructions():
    out = []
    for task_type in L.TaskType:
        for d in L.directions_for(task_type):
            for t in range(L.TEMPLATES_PER_TASK):
                out.append(L.render_instruction(L.TaskSpec(task_type, d), t))
    return out


class TestRender:
    def test_reference_sentence(self):
        task = L.TaskSpec(L.TaskType.CORNER, L.Direction.BOTTOM_LEFT)
        assert L.render_instruction(task, 0) == "fold the bottom left corner to the center"

    def test_deterministic(self):
        task = L.TaskSpec(L.TaskType.HALF, L.Direction.LEFT_OVER_RIGHT)
        assert L.render_instruction(task, 5) == L.render_instruction(task, 5)

    def test_every_triple_distinct(self):
        sentences = all_instructions()
        assert len(sentences) == 3 * 4 * 16
        assert len(set(sentences)) == len(sentences)

    def test_bad_template_id(self):
        task = L.TaskSpec(L.TaskType.CORNER, L.Direction.TOP_LEFT)
        with pytest.raises(L.GrammarError):
            L.render_instruction(task, 16)

    def test_direction_family_enforced(self):
        with pytest.raises(L.GrammarError):
            L.TaskSpec(L.TaskType.CORNER, L.Direction.LEFT_OVER_RIGHT)
        with pytest.raises(L.GrammarError):
            L.TaskSpec(L.TaskType.HALF, L.Direction.TOP_RIGHT)

    def test_sentences_fit_token_budget(self):
        for s in all_instructions():
            assert len(s.split()) <= L.MAX_TOKENS


class TestTokenize:
    def test_empty_is_all_pad(self):
        assert np.array_equal(L.tokenize(""), np.full(12, L.PAD_ID))

    def test_repetition(self):
        ids = L.tokenize("fold fold fold")
        fold = L.VOCAB["fold"]
        assert ids.tolist() == [fold] * 3 + [L.PAD_ID] * 9

    def test_unknown_word_maps_to_unk(self):
        ids = L.tokenize("fold the xylophone")
        assert ids[2] == L.UNK_ID

    def test_too_long_rejected(self):
        with pytest.raises(L.GrammarError):
            L.tokenize("a " * 13)

    def test_round_trip_over_grammar(self):
        for s in all_instructions():
            assert L.detokenize(L.tokenize(s)) == s

    def test_vocab_reserved_ids(self):
        assert L.VOCAB_SIZE <= L.MAX_VOCAB
        assert L.VOCAB["<pad>"] == 0 and L.VOCAB["<unk>"] == 1
        ids = sorted(L.VOCAB.values())
        assert ids == list(range(L.VOCAB_SIZE))


class TestSplits:
    def setup_method(self):
        self.splits = L.build_splits(seed=0)

    def counts_for(self, task_type):
        return {
            s: sum(1 for i in self.splits[s] if i.task.task_type is task_type)
            for s in L.Split
        }

    def test_counts_per_task(self):
        for task_type in L.TaskType:
            c = self.counts_for(task_type)
            assert c[L.Split.SEEN] == 36
            assert c[L.Split.UNSEEN_INSTRUCTION] == 12
            assert c[L.Split.UNSEEN_TASK] == 16

    def test_partition(self):
        texts = [i.text for s in L.Split for i in self.splits[s]]
        assert len(texts) == len(set(texts)) == 192
        assert set(texts) == set(all_instructions())

    def test_paper_example_is_unseen_task(self):
        unseen = {i.text for i in self.splits[L.Split.UNSEEN_TASK]}
        assert "fold the bottom right corner to the center" in unseen

    def test_held_out_directions_fixed(self):
        assert L.HELD_OUT_DIRECTION[L.TaskType.CORNER] is L.Direction.BOTTOM_RIGHT
        assert L.HELD_OUT_DIRECTION[L.TaskType.TRIANGLE] is L.Direction.BOTTOM_RIGHT
        assert L.HELD_OUT_DIRECTION[L.TaskType.HALF] is L.Direction.BOTTOM_OVER_TOP
        for s in (L.Split.SEEN, L.Split.UNSEEN_INSTRUCTION):
            for ins in self.splits[s]:
                assert ins.task.direction is not L.HELD_OUT_DIRECTION[ins.task.task_type]

    def test_unseen_sentences_have_no_unks(self):
        for s in (L.Split.UNSEEN_INSTRUCTION, L.Split.UNSEEN_TASK):
            for ins in self.splits[s]:
                assert L.UNK_ID not in ins.tokens

    def test_deterministic_across_seeds(self):
        again = L.build_splits(seed=99)
        for s in L.Split:
            assert [i.text for i in self.splits[s]] == [i.text for i in again[s]]

    def test_instruction_lookup_round_trip(self):
        for s in L.Split:
            for ins in self.splits[s]:
                back = L.instruction_from_text(ins.text)
                assert back == ins
        with pytest.raises(L.GrammarError):
            L.instruction_from_text("please iron the shirt")

    def test_task_codes_round_trip(self):
        for task_type in L.TaskType:
            for d in L.directions_for(task_type):
                spec = L.TaskSpec(task_type, d)
                again = L.TaskSpec.from_codes(spec.task_type.value, spec.direction_code)
                assert again == spec
