# Tests for API v1 endpoints
