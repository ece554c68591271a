"""harness - experiment orchestration for the spankey lab."""
