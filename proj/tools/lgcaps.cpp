// CLI entry point; subcommands are filled in as the library grows.
#include <cstdio>

int main() {
  std::puts("lgcaps: no subcommand given");
  return 2;
}
