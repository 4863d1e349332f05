# Tests for services
