"""Small architectures shared across test modules."""

from tsskd.models import PROPOSAL, ArchConfig, LayerSpec, build_model


def small_arch(head_kind=PROPOSAL, widths=(4, 6, 6)):
    """Three-layer net whose score map matches the desk teacher's 9x9 grid."""
    layers = (LayerSpec(widths[0], 3, 2), LayerSpec(widths[1], 3, 2), LayerSpec(widths[2], 3, 1))
    return ArchConfig(layers=layers, head_kind=head_kind, head_channels=2)


def models_for(head_kind, seeds=(0, 1), widths=((4, 6, 6), (3, 5, 4))):
    return [build_model(small_arch(head_kind, w), s) for s, w in zip(seeds, widths)]


# Acceptance outcomes, printed by the terminal-summary hook in conftest.
ACCEPTANCE = {}


def criterion(number, ok, detail):
    """Record one acceptance criterion's outcome, then assert it."""
    ACCEPTANCE[number] = (bool(ok), detail)
    assert ok, f"criterion {number}: {detail}"
