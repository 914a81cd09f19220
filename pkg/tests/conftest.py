from __future__ import annotations

import pytest

from graphmem.extraction import RuleExtractor
from graphmem.latent import EmbedderParams
from graphmem.model import BuildConfig
from graphmem.reasoner import build_memory
from graphmem.synthetic import GenConfig, generate_suite


@pytest.fixture(scope="session")
def small_suite():
    return generate_suite(12, GenConfig(seed=5))


@pytest.fixture(scope="session")
def small_memories(small_suite):
    ep = EmbedderParams()
    cfg = BuildConfig(global_cap=50)
    return [build_memory(i.context, RuleExtractor(), cfg, ep) for i in small_suite]
