#include "megabyte/cli.hpp"

int main(int argc, char** argv) {
  return megabyte::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
