# Tests for GSC Desk
