#include <iostream>

#include "prefalign/cli.hpp"

int main(int argc, char** argv) {
  return prefalign::cli::run(argc, argv, std::cout, std::cerr);
}
