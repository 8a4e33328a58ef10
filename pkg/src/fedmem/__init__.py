"""fedmem: a deterministic federated-learning simulator in plain numpy.

Modules:

* :mod:`fedmem.numerics`: MLP parameters, reverse-mode gradients, Adam, binary I/O
* :mod:`fedmem.datasets`: synthetic blobs, CSV loading, stratified splits
* :mod:`fedmem.partitioning`: Dirichlet and pathological client partitions, dropout schedules
* :mod:`fedmem.protocol`: FedAvg / FedProx / async rounds and the local baseline
* :mod:`fedmem.generator`: conditional generator trained from frozen client models
* :mod:`fedmem.personalization`: friend models and model interpolation
* :mod:`fedmem.config`, :mod:`fedmem.experiment`, :mod:`fedmem.report`, :mod:`fedmem.cli`: the harness
"""

__version__ = "0.1.0"
