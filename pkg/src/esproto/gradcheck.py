"""Estimator-versus-analytical checks on synthetic fitness functions.

Backs the ``grad-check`` command. Each check builds a fitness with a known
gradient, runs one estimator and compares.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .es import (
    ESConfig,
    apply_update,
    evaluate_population,
    fd_gradient,
    nes_gradient,
    sample_population,
    wsr_gradient,
)


@dataclass
class CheckResult:
    name: str
    measured: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail or f'{self.measured:.4g} vs {self.threshold:g}'}"


def random_quadratic(dim: int, seed: int, zero_at_mean: bool = False):
    """F(z) = -(z - z*)^T A (z - z*) + c with A symmetric positive definite.

    ``c`` is 0, or chosen so F(mu) = 0 when ``zero_at_mean`` is set.
    Returns ``(fitness, gradient_fn, mu)`` where ``mu`` is a random start.
    """
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((dim, dim))
    a = m.T @ m / dim + 0.5 * np.eye(dim)
    z_star = rng.standard_normal(dim)
    mu = z_star + rng.standard_normal(dim)
    offset = float((mu - z_star) @ a @ (mu - z_star)) if zero_at_mean else 0.0

    def fitness(z):
        d = np.asarray(z, dtype=np.float64) - z_star
        return offset - float(d @ a @ d)

    def gradient(z):
        return -2.0 * a @ (np.asarray(z, dtype=np.float64) - z_star)

    return fitness, gradient, mu


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def check_fd_quadratic(dim=50, sigma_fd=1e-3, seed=0, tol=1e-2) -> CheckResult:
    fitness, gradient, mu = random_quadratic(dim, seed)
    est = fd_gradient(mu, fitness, sigma_fd)
    exact = gradient(mu)
    err = float(np.linalg.norm(est.grad - exact) / np.linalg.norm(exact))
    return CheckResult("fd vs closed-form (quadratic)", err, tol, err < tol,
                       f"relative L2 error {err:.3g} < {tol:g}")


def check_wsr_quadratic(dim=50, n=4096, sigma=0.05, seed=0, threshold=0.9) -> CheckResult:
    fitness, gradient, mu = random_quadratic(dim, seed)
    cfg = ESConfig(sigma=sigma, pop_per_worker=n, workers=1, seed=seed)
    pop = evaluate_population(mu, sample_population(mu, cfg, 0), fitness)
    cos = cosine(wsr_gradient(pop, cfg).grad, gradient(mu))
    return CheckResult("wsr vs closed-form (quadratic)", cos, threshold, cos > threshold,
                       f"cosine {cos:.4f} > {threshold:g}")


def check_wsr_nes_agreement(dim=50, n=4096, sigma=0.05, seed=0, threshold=0.8) -> CheckResult:
    # NES has no reward baseline; a large constant fitness only adds variance
    fitness, _, mu = random_quadratic(dim, seed, zero_at_mean=True)
    cfg = ESConfig(sigma=sigma, pop_per_worker=n, workers=1, seed=seed + 1)
    pop = evaluate_population(mu, sample_population(mu, cfg, 0), fitness)
    cos = cosine(wsr_gradient(pop, cfg).grad, nes_gradient(pop, cfg).grad)
    return CheckResult("wsr vs nes (same population)", cos, threshold, cos > threshold,
                       f"cosine {cos:.4f} > {threshold:g}")


def check_nes_linear(dim=10, n=100_000, sigma=0.1, seed=0, k=3.0) -> CheckResult:
    """NES on F(z) = a.z recovers a within k Monte-Carlo standard errors per component."""
    rng = np.random.default_rng(seed)
    slope = rng.standard_normal(dim)
    mu = rng.standard_normal(dim)
    cfg = ESConfig(sigma=sigma, pop_per_worker=n, workers=1, seed=seed)
    pop = evaluate_population(mu, sample_population(mu, cfg, 0), lambda z: float(slope @ z))
    est = nes_gradient(pop, cfg).grad
    terms = pop.rewards[:, None] * pop.displacements.astype(np.float64) / sigma**2
    se = terms.std(axis=0, ddof=1) / np.sqrt(n)
    z = np.abs(est - slope) / se
    worst = float(z.max())
    return CheckResult("nes vs slope (linear)", worst, k, worst < k,
                       f"max |error| / s.e. = {worst:.2f} < {k:g}")


def quadratic_descent(dim=20, n=512, alpha=0.05, sigma=0.05, steps=200, seed=0,
                      start_distance=1.0) -> np.ndarray:
    """WSR ascent on F(z) = -|z - z*|^2 from a point ``start_distance`` away.

    Returns the distance to the optimum before the first step and after each one.
    """
    rng = np.random.default_rng(seed)
    z_star = rng.standard_normal(dim)
    direction = rng.standard_normal(dim)
    mu = z_star + start_distance * direction / np.linalg.norm(direction)
    cfg = ESConfig(alpha=alpha, sigma=sigma, pop_per_worker=n, workers=1, seed=seed)

    def fitness(z):
        d = z - z_star
        return -float(d @ d)

    distances = [float(np.linalg.norm(mu - z_star))]
    for step in range(steps):
        pop = evaluate_population(mu, sample_population(mu, cfg, step), fitness)
        mu = apply_update(mu, wsr_gradient(pop, cfg), alpha)
        distances.append(float(np.linalg.norm(mu - z_star)))
    return np.array(distances)


def run_all() -> list[CheckResult]:
    return [
        check_fd_quadratic(),
        check_wsr_quadratic(),
        check_wsr_nes_agreement(),
        check_nes_linear(),
    ]
