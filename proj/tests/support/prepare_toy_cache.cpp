#include <iostream>

#include "test_support.hpp"

int main() {
  const auto path = mimicry::testing::shared_toy_checkpoint();
  std::cout << "toy checkpoint: " << path.string() << '\n';
  return 0;
}
