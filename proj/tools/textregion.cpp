#include "textregion/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return textregion::cli::run(argc, argv, std::cout, std::cerr); }
