"""
Dérivation de graines indépendantes à partir d'une graine d'expérience.
"""
import numpy as np


def derive_seed(*parts: int) -> int:
    """
    Graine 32 bits déterministe pour un tuple d'entiers (graine, client, classe...).

    Deux tuples différents donnent des flux indépendants, quelle que soit la position
    des éléments dans les listes qui les ont produits.
    """
    sequence = np.random.SeedSequence([int(p) for p in parts])
    return int(sequence.generate_state(1)[0])
