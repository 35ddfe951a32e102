#include <iostream>

#include "energy_attn/cli.hpp"

int main(int argc, char** argv) {
  return energy_attn::run_cli(argc, argv, std::cout, std::cerr);
}
