#include <cstdio>

int main() {
  std::puts("flexmol: cli not wired yet");
  return 2;
}
