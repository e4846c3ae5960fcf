import time
from dataclasses import dataclass, field

import pytest

from momask_lab.codec import CodecParams, TrainLog, tokenize, train_rvqvae
from momask_lab.corpus import Corpus, OracleParams, generate_corpus, oracle_classifier
from momask_lab.engine import Models
from momask_lab.mformer import MTransformerParams, TransformerLog, train_mformer
from momask_lab.ndmath import Rng
from momask_lab.rformer import RTransformerParams, train_rformer
from momask_lab.toolkit.config import RunConfig, toy_preset

_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion reported in the summary")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None and (rep.when == "call" or rep.failed):
        n, title = mark.args
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if rep.when != "call":
            detail = f"{rep.when} error" + (f"; {detail}" if detail else "")
        if n not in _RESULTS or _RESULTS[n][0] == "PASS":
            _RESULTS[n] = ("PASS" if rep.passed else "FAIL", title, detail)
    return rep


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2} {status}  {title}" + (f"  [{detail}]" if detail else ""))


@dataclass
class ToyStack:
    cfg: RunConfig
    corpus: Corpus
    codec: CodecParams
    codec_log: TrainLog
    codec_q0: CodecParams
    oracle: OracleParams
    oracle_accuracy: float
    mformer: MTransformerParams
    mformer_log: TransformerLog
    rformer: RTransformerParams
    rformer_log: TransformerLog
    seconds: dict[str, float] = field(default_factory=dict)

    @property
    def models(self) -> Models:
        return Models(self.codec, self.mformer, self.rformer)


@pytest.fixture(scope="session")
def toy_stack() -> ToyStack:
    """Everything trained once on the toy preset with seed 0, single thread."""
    cfg = toy_preset()
    root = Rng(cfg.seed)
    seconds = {}

    def timed(name, fn):
        t = time.perf_counter()
        out = fn()
        seconds[name] = time.perf_counter() - t
        return out

    corpus = generate_corpus(cfg.corpus)
    motions, labels = corpus.subset("train")
    codec, codec_log = timed("codec", lambda: train_rvqvae(motions, cfg, root.stream("codec")))
    cfg_q0 = toy_preset()
    cfg_q0.rvq.dropout_q = 0.0
    codec_q0, _ = timed("codec_q0", lambda: train_rvqvae(motions, cfg_q0, root.stream("codec")))
    oracle, oacc = timed("oracle", lambda: oracle_classifier(corpus, root.stream("oracle"), cfg.oracle))
    stacks = [tokenize(m, codec).rows for m in motions]
    k = codec.rvq.layers[0].size
    n_labels = len(corpus.class_names)
    mformer, mlog = timed("mformer", lambda: train_mformer([s[0] for s in stacks], labels, n_labels, k, cfg.mformer,
                                                           root.stream("mformer")))
    rformer, rlog = timed("rformer", lambda: train_rformer(stacks, labels, n_labels, k, codec.rvq.depth - 1, cfg.rformer,
                                                           root.stream("rformer")))
    return ToyStack(cfg, corpus, codec, codec_log, codec_q0, oracle, oacc, mformer, mlog, rformer, rlog, seconds)
