#include "cli.hpp"

int main(int argc, char** argv) {
  return qbh::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
