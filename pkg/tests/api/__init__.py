# Tests for API layer
