// CLI skeleton; subcommands are filled in alongside the library modules.
#include <cstdio>

int main() {
  std::fprintf(stderr, "pfgls: not wired up yet\n");
  return 3;
}
