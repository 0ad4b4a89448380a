// Placeholder until the pipeline lands; replaced by the real CLI.
int main() { return 0; }
