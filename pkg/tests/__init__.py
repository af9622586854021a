# mgprnn tests
