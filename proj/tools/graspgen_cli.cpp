#include <iostream>

#include "graspgen/pipeline.hpp"

int main(int argc, char** argv) {
  return graspgen::pipeline::run_cli(argc, argv, std::cout, std::cerr);
}
