'''
Test the package scheduler callbacks
'''
import pytest
import tqdm

from obsdiff import callback_text, callback_setup, callback_none
from obsdiff.utils import ProgressBar

REPORTS = [{'layer': 'b0.attn.q', 'recon_error': 0.25},
           {'layer': 'b0.attn.k', 'recon_error': 0.5}]


def test_callback_text(capsys):
    callback_text(None, REPORTS, 2)
    out = capsys.readouterr().out
    assert out.startswith('Package 2: pruned b0.attn.q, b0.attn.k')
    assert 'recon error: 0.75' in out
    callback_text(None, [], 0)
    assert capsys.readouterr().out == 'Package 0: nothing to prune\n'


def test_callback_none():
    assert callback_none(None, REPORTS, 1) is None


def test_ProgressBar():
    pb = ProgressBar(total=3)
    assert isinstance(pb.t, tqdm.tqdm)
    pb(None, REPORTS, 0)
    assert pb.t.n == 1
    assert pb.error == 0.75
    pb(None, [], 1)
    assert pb.error == 0.75


def test_callback_setup():
    assert callback_setup('text', 4) == callback_text
    assert isinstance(callback_setup('progressbar', 4), ProgressBar)

    c = callback_setup(None, 4)
    assert callable(c)
    assert c(None, REPORTS, 0) is None

    def callback(package, layer_reports, index):
        return index == 1

    c = callback_setup(callback, 4)
    assert c is callback
    assert c(None, REPORTS, 1)

    with pytest.raises(TypeError):
        callback_setup('verbose', 4)
    with pytest.raises(TypeError):
        callback_setup(3, 4)
