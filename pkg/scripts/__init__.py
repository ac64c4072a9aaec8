"""Self-triggered DMPC simulator scripts."""
