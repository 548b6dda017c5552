import json
import sys

import numpy as np
import pytest
import torch


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_integration")
    lines = getattr(module, "CRITERION_LINES", None) if module else None
    if lines:
        terminalreporter.section("integration criteria")
        for line in lines:
            terminalreporter.write_line(line)
from tokenizers import Tokenizer
from tokenizers.models import BPE
from tokenizers.pre_tokenizers import Whitespace
from tokenizers.trainers import BpeTrainer
from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

WORDS = (
    "signal noise channel code token model weight mixture entropy bits "
    "river stone cloud forest ember quartz meadow harbor lantern orbit "
    "quiet sudden narrow golden broken silent rapid frozen hidden bright "
    "walks turns holds finds keeps draws lifts bends folds marks"
).split()


def make_corpus_texts(n_docs=20, words_per_doc=18, seed=7):
    rng = np.random.default_rng(seed)
    return [
        " ".join(rng.choice(WORDS, size=words_per_doc).tolist()) for _ in range(n_docs)
    ]


def build_tokenizer(texts, vocab_size=160):
    tok = Tokenizer(BPE(unk_token="<unk>"))
    tok.pre_tokenizer = Whitespace()
    trainer = BpeTrainer(vocab_size=vocab_size, special_tokens=["<unk>", "<s>", "</s>"])
    tok.train_from_iterator(texts, trainer)
    return PreTrainedTokenizerFast(
        tokenizer_object=tok, unk_token="<unk>", bos_token="<s>", eos_token="</s>"
    )


def build_model_dir(base, name, tokenizer, seed):
    torch.manual_seed(seed)
    config = GPT2Config(
        vocab_size=len(tokenizer),
        n_positions=256,
        n_embd=32,
        n_layer=2,
        n_head=2,
        bos_token_id=tokenizer.bos_token_id,
        eos_token_id=tokenizer.eos_token_id,
    )
    model = GPT2LMHeadModel(config)
    target = base / name
    tokenizer.save_pretrained(target)
    model.save_pretrained(target)
    return target


@pytest.fixture(scope="session")
def corpus_texts():
    return make_corpus_texts()


@pytest.fixture(scope="session")
def shared_tokenizer(corpus_texts):
    return build_tokenizer(corpus_texts)


@pytest.fixture(scope="session")
def model_dirs(tmp_path_factory, corpus_texts, shared_tokenizer):
    base = tmp_path_factory.mktemp("models")
    a = build_model_dir(base, "tiny-a", shared_tokenizer, seed=11)
    b = build_model_dir(base, "tiny-b", shared_tokenizer, seed=23)
    return a, b


@pytest.fixture(scope="session")
def mismatched_model_dir(tmp_path_factory, corpus_texts):
    other_tokenizer = build_tokenizer(corpus_texts, vocab_size=120)
    base = tmp_path_factory.mktemp("models-mismatch")
    return build_model_dir(base, "tiny-c", other_tokenizer, seed=31)


def write_corpus_jsonl(path, texts, n_artificial):
    rows = []
    for i, text in enumerate(texts):
        artificial = i < n_artificial
        rows.append(
            {
                "doc_id": f"doc{i:03d}",
                "text": text,
                "label": "artificial" if artificial else "human",
                "generator": "toy-gen" if artificial else None,
                "language": "en",
                "source_corpus": "toy",
            }
        )
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return path
