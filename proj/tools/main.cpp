#include "fishpose/commands.hpp"

int main(int argc, char** argv) { return fishpose::cli::run(argc, argv); }
