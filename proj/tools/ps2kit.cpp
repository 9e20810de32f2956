#include <cstdio>
int main() { std::puts("ps2kit: stub"); return 0; }
