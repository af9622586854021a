# Unit tests for mgprnn
