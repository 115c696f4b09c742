// SPDX-License-Identifier: Apache-2.0
#include <cstdio>

int main() {
    std::puts("moelab: CLI under construction");
    return 1;
}
