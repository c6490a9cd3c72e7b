import warnings

import pytest

from fslpn import data as D
from fslpn import synthetic
from fslpn.model import ModelConfig


@pytest.fixture(scope="session")
def csv_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    train, test = root / "train.csv", root / "test.csv"
    synthetic.write_csv(train, "unsw_nb15", 2000, seed=0, separation=0.6)
    synthetic.write_csv(test, "unsw_nb15", 800, seed=1, separation=0.6)
    return train, test


@pytest.fixture(scope="session")
def small_split(csv_files):
    """Selected, normalized (train, test) datasets with 13 features."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        raw_tr = D.load_dataset(csv_files[0], "unsw_nb15")
        raw_te = D.load_dataset(csv_files[1], "unsw_nb15")
        enc = D.build_encoding(raw_tr)
        tr = D.preprocess(raw_tr, enc)
        kept = D.sulov_select(tr, 13).kept
        return D.preprocess(tr, columns=kept), D.preprocess(raw_te, enc, columns=kept)


@pytest.fixture(scope="session")
def tiny_model_cfg():
    return ModelConfig.default(13, channels=8, conv_layers=3, out_dim=8)
