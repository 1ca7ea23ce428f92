# plaincnn - plain CNN training stack
