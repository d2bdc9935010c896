"""Program-aware scheduling simulator for agentic LLM workloads."""
