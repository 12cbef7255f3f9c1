"""
Checking backprop against finite differences
============================================

Every layer's backward pass is compared with central differences in
float64. Probes whose +/- epsilon step flips a relu or changes a max-pool
winner are skipped, since the function is not differentiable there.
"""

# %%
from crossview.gradcheck import check_model

for kind, tol in [("linear", 1e-6), ("default", 1e-3), ("ground", 1e-3), ("multi", 1e-3)]:
    report = check_model(kind, tolerance=tol)
    print(f"--- {kind}")
    print(report.summary())
