"""Device-cloud collaborative learning on a from-scratch numpy CNN engine.

Modules: ``tensor`` (autodiff engine), ``model`` (specs, splitting, sizes),
``data`` (synthetic sets, file format, partitioning), ``training`` (the four
local phases), ``simnet`` (two-node simulation and baselines), ``config`` and
``cli`` (experiment runner).
"""

__version__ = "0.1.0"
