"""Vector Lyapunov stability certificates for interconnected polynomial systems.

Modules: ``poly`` (sparse polynomials), ``sdp`` (semidefinite programs),
``sos`` (sum-of-squares programs), ``model`` (interconnected systems),
``power`` (network models and recasting), ``roa`` (per-subsystem estimates),
``certify`` (level-sequence iteration), ``control`` (local control laws),
``sim`` (time-domain checks) and ``cli``.
"""

__version__ = "0.1.0"
