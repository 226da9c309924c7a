import pytest
import torch

from bertram_lab.encoder import EncoderConfig, PretrainConfig, pretrain_mlm
from bertram_lab.text import Corpus, build_vocab
from bertram_lab.toydata import ToyConfig, make_world

torch.set_num_threads(1)

SMALL_TOY = ToyConfig(n_frequent=40, n_medium=10, n_rare=30, n_misspelled=8,
                      frequent_range=(30, 40), n_dataset=150, seed=0)


class Lab:
    """Small world, corpus, vocabulary and a briefly pretrained encoder."""

    def __init__(self):
        self.world = make_world(SMALL_TOY)
        self.corpus = Corpus.from_sentences(self.world.sentences)
        self.vocab = build_vocab(self.corpus, target_size=400, min_whole_word_freq=30)
        cfg = EncoderConfig(len(self.vocab), n_layers=2, d=32, n_heads=2, d_ff=64, max_len=32, seed=0)
        self.encoder, _ = pretrain_mlm(self.corpus, self.vocab, cfg,
                                       PretrainConfig(epochs=1, batch_size=32))
        self.encoder.freeze()


@pytest.fixture(scope="session")
def lab():
    return Lab()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


_CRITERIA: dict = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    number, title = mark.args
    failed = call.excinfo is not None
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    if failed:
        entry["ok"] = False
    if call.when == "call":
        entry["details"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] else "FAIL"
        detail = f" [{', '.join(e['details'])}]" if e["details"] else ""
        terminalreporter.write_line(f"criterion {number}: {status} - {e['title']}{detail}")
