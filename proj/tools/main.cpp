#include <iostream>

#include "cli.hpp"
#include "rundet/runtime.hpp"

int main(int argc, char** argv) {
  rundet::tune_allocator();
  return rundet::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
