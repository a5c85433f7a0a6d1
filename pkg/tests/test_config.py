import pytest

from qkdgrid.config import SCENARIO_DIR, library, load_config, parse_config
from qkdgrid.errors import ConfigError
from qkdgrid.qkd import Mode


def test_empty_text_gives_defaults():
    cfg = parse_config("")
    assert cfg.duration == 5.0 and cfg.dt == 1e-4 and cfg.t_s == 1e-3
    assert cfg.mode is Mode.FORTIFIED
    assert cfg.substeps == 10 and cfg.n_steps == 5000
    assert cfg.plant.n_dg == 4 and cfg.topology.k_gain == 12.0
    assert cfg.attack_onset is None


def test_keys_before_first_section_belong_to_run():
    cfg = parse_config("seed = 9\nmode = baseline\n[qkd]\nn_raw = 512\n")
    assert cfg.seed == 9 and cfg.mode is Mode.BASELINE and cfg.qkd.n_raw == 512


def test_attack_sections():
    cfg = parse_config(
        """
        [attack eve]
        kind = eavesdrop
        links = 1->2, 3->4   # source->destination
        p_intercept = 0.5
        start = 1.0
        end = 2.0

        [attack bad nodes]
        kind = node
        targets = 2 3
        bias = 0.1, 10, 1
        start = 0.5
        """.replace("\n        ", "\n")
    )
    edges = sorted(e.edge for e in cfg.eavesdroppers)
    assert edges == [(1, 0), (3, 2)]  # (consumer, source), 0-based
    assert cfg.eavesdroppers[0].eve.p_intercept == 0.5
    atk = cfg.node_attacks[0]
    assert atk.targets == {1, 2} and atk.bias == (0.1, 10.0, 1.0) and atk.t_end is None
    assert cfg.attack_onset == 0.5


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("[run]\nduration = 5\nbogus = 1\n", "line 3: [run] bogus: unknown key"),
        ("[plant]\nm_p = abc\n", "line 2: [plant] m_p"),
        ("[nope]\n", "unknown section"),
        ("[run]\ndt = 3e-4\n", "does not divide"),
        ("[topology]\nk_gain = 1.0\n", "below the consensus bound"),
        ("[attack x]\nkind = eavesdrop\nlinks = 1-2\n", "SRC->DST"),
        ("[attack x]\nkind = node\nlinks = 1->2\ntargets = 2\n", "not valid for a node attack"),
        ("[attack x]\nkind = eavesdrop\nlinks = 1->9\n", "not a DG pair"),
        ("[attack x]\nkind = node\ntargets = 2\nstart = 7\n", "outside"),
        ("[attack x]\nkind = flood\n", "unknown attack kind"),
        ("[qkd]\nkey_buffer_bits = 100\n", "192-bit"),
        ("[topology]\nadjacency = 0100;0010;0001;0000\n", "unpinned or disconnected"),
        ("[plant]\nloads = 7:25\n", "bus 7"),
        ("[run\n", "syntax"),
    ],
)
def test_config_errors_are_located(text, fragment):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert fragment in str(exc.value)


def test_low_gain_can_be_forced():
    cfg = parse_config("[topology]\nk_gain = 1.0\nallow_low_gain = yes\n")
    assert cfg.topology.k_gain == 1.0


def test_custom_adjacency_and_pinning():
    cfg = parse_config("[topology]\nadjacency = 0101;1010;0101;1010\npinning = 1 0 1 0\n")
    assert cfg.topology.matrix(4).sources(0) == [1, 3]
    assert cfg.topology.pin(4).pinned == [0, 2]


def test_library_scenarios_all_parse():
    names = library()
    assert {"clean", "short_observer", "persistent_observer", "fortified_short",
            "fortified_persistent", "n_minus_1"} <= set(names)
    for name in names:
        cfg = load_config(name)
        assert cfg.name == name
        assert cfg == load_config(SCENARIO_DIR / f"{name}.cfg")


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/scenario.cfg")


def test_replace_validates():
    cfg = parse_config("")
    assert cfg.replace(seed=3).seed == 3
    with pytest.raises(ConfigError):
        cfg.replace(duration=-1.0)


def test_short_observer_schedules_two_windows():
    cfg = load_config("short_observer")
    assert sorted(e.edge for e in cfg.eavesdroppers) == [(1, 0), (3, 0)]
    assert {(e.eve.t_start, e.eve.t_end) for e in cfg.eavesdroppers} == {(2.32, 2.5)}
