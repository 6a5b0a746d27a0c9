"""Loewner evolution in doubly connected domains: kernels, flows, lattice walks and observables."""

