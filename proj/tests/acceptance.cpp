// Acceptance suite: one pass/fail line per criterion. Placeholder while the
// pipeline is assembled.
int main() { return 0; }
