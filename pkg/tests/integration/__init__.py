# Integration tests for mgprnn
