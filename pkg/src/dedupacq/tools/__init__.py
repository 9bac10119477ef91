"""Low-level tools: FAT parsing, fixture images, hashing and the wire codec."""
