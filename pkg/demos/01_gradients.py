"""Build a tiny graph by hand, differentiate it, and watch the checker catch a broken rule."""
import numpy as np

from pamd.gradtape import Graph, fault_injection, finite_diff_check, op_gradcheck_suite, value_and_grad

rng = np.random.default_rng(0)

# a two-layer perceptron with a squared-error loss
g = Graph()
x = g.input("x", (5, 3))
w1, w2 = g.param("w1", (3, 4)), g.param("w2", (4, 1))
y = g.input("y", (5, 1))
loss = g.mse(g.matmul(g.tanh(g.matmul(x, w1)), w2), y)

binds = {"x": rng.normal(size=(5, 3)), "w1": rng.normal(size=(3, 4)), "w2": rng.normal(size=(4, 1)),
         "y": rng.normal(size=(5, 1))}
value, grads = value_and_grad(g, binds, loss)
print(f"loss {value:.4f}; dL/dw2 = {grads['w2'].ravel().round(4)}")
print(f"finite-difference agreement: {finite_diff_check(g, binds, 1e-6, loss):.2e}")

report = op_gradcheck_suite(seed=0)
print(f"every op ({len(report)}) checked, worst relative error {max(report.values()):.2e}")

# scale the matmul backward by 1.5; the same check now fails loudly
with fault_injection("matmul", 1.5):
    bad = finite_diff_check(g, binds, 1e-6, loss)
print(f"with a corrupted matmul rule: {bad:.2e}")
