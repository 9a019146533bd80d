"""Endpoint protocols: the bounded-loss transport and the reliable baseline."""
