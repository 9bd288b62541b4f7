// Command-line surface; subcommands are filled in as modules land.
#include <cstdio>

int main() {
  std::puts("mltr: no subcommand given");
  return 2;
}
