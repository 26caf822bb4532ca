// Copyright (c) 2026 direct-pretrain contributors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>

int main() {
  std::puts("dpt: CLI under construction");
  return 0;
}
