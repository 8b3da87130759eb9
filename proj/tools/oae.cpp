#include <cstdio>

int main() {
    std::puts("oae: subcommands not wired up yet");
    return 0;
}
