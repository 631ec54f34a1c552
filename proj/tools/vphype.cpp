#include <cstdio>

int main() {
  std::puts("vphype: subcommands not wired yet");
  return 2;
}
