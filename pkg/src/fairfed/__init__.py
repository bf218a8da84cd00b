"""Fair-exposure contextual bandits in a simulated federation.

Modules: ``numkit`` (small SPD linear algebra), ``environment`` (instances,
contexts, rewards), ``fairness`` (merit functions, policies, regrets),
``optimizer`` (projected gradient ascent over confidence ellipsoids),
``agent`` (per-agent state machine and confidence radii), ``privatizer``
(tree-based private releases), ``federation`` (round loop and sync
protocols), ``harness`` (experiment presets and CSV output) and ``cli``.
"""

__version__ = "0.1.0"
