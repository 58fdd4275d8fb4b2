// SPDX-License-Identifier: Apache-2.0
#include <cstdio>

int main(int argc, char** argv) {
  (void)argc;
  (void)argv;
  std::fprintf(stderr, "histrec: command-line interface not wired up yet\n");
  return 2;
}
