"""Dataset, training orchestration, campaigns, defenses and reports around the core attacks."""
