// acceptance criteria suite; filled in at the end of the build
