import numpy as np
import pytest

from sumlab.data import BOS_ID, EOS_ID, ExamplePair, TokenSequence
from sumlab.model import ModelConfig, Seq2SeqModel


def tiny_config(vocab_size=6, d_model=8, n_heads=2, n_layers=1, d_ff=16,
                max_doc_len=8, max_sum_len=8, dropout_rate=0.0) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size, d_model=d_model, n_heads=n_heads,
        n_enc_layers=n_layers, n_dec_layers=n_layers, d_ff=d_ff,
        max_doc_len=max_doc_len, max_sum_len=max_sum_len,
        dropout_rate=dropout_rate)


def tiny_model(seed=0, **kwargs) -> Seq2SeqModel:
    return Seq2SeqModel.initialize(tiny_config(**kwargs), seed)


def random_pair(rng, vocab_size=6, doc_len=5, sum_len=3) -> ExamplePair:
    """A random example: document of content ids, BOS..EOS summary."""
    content = [t for t in range(4, vocab_size)] or [3]
    doc = tuple(int(rng.choice(content)) for _ in range(doc_len))
    summ = tuple(int(rng.choice(content)) for _ in range(sum_len))
    return ExamplePair(
        TokenSequence(doc),
        TokenSequence((BOS_ID,) + summ + (EOS_ID,)))


def assert_grads_close(analytic: np.ndarray, numeric: np.ndarray, tol=1e-4):
    """Relative-error gate with a unit floor on the denominator."""
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    assert a.shape == n.shape
    denom = np.maximum(1.0, np.abs(a))
    worst = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
    assert worst <= tol, "gradient mismatch: worst relative error %g" % worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, emitted after the run so the report
# survives pytest's output capture.
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[num])
